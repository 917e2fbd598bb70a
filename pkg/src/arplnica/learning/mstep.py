"""Closed-form updates of the regime prior and the source dynamics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..generative import RegimePrior, SourceDynamics
from ..variational import forward_moments, switch_marginals
from .elbo import PSI_FLOOR

MASS_EPS = 1e-12


@dataclass
class SufficientStats:
    """Expected sufficient statistics accumulated over sequences.

    Dynamics sums run over transitions and are weighted by the destination
    regime marginal ``alpha_{t+1}``.
    """

    n: float
    nu: np.ndarray        # (d, C) sum of nu
    trans: np.ndarray     # (d, C, C) sum_t tau_{t,kl} alpha_{t,l}
    trans_from: np.ndarray  # (d, C) sum over t < T-1 of alpha_{t,l}
    w0: np.ndarray        # (d, C) initial-state mass
    s0: np.ndarray        # sum alpha_0 mu_0
    s00: np.ndarray       # sum alpha_0 (sigma_0 + mu_0^2)
    w: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    sxx: np.ndarray
    sxy: np.ndarray
    syy: np.ndarray

    def scaled(self, factor):
        return SufficientStats(*(factor * np.asarray(v) for v in vars(self).values()))

    def __add__(self, other):
        return SufficientStats(*(a + b for a, b in zip(vars(self).values(), vars(other).values())))


def sufficient_stats(src, sw, moments=None, alpha=None):
    """Sufficient statistics of a batched proxy pair (any leading batch axes)."""
    mom = forward_moments(src) if moments is None else moments
    alpha = switch_marginals(sw).alpha if alpha is None else alpha
    mu, sig, Bt = mom.mu, mom.sigma, src.B_tilde
    lead = mu.shape[:-2]
    ax = tuple(range(len(lead)))
    d, C = alpha.shape[-2:]

    def tot(x, extra=()):
        return np.sum(x, axis=ax + extra) if (ax or extra) else x

    a0 = alpha[..., 0, :, :]
    mu0, sig0 = mu[..., 0, :, None], sig[..., 0, :, None]
    n = float(np.prod(lead)) if lead else 1.0
    T = mu.shape[-2]
    tax = (len(lead),)
    if T > 1:
        trans = tot(sw.tau * alpha[..., :-1, :, None, :], tax)
        trans_from = tot(alpha[..., :-1, :, :], tax)
        a1 = alpha[..., 1:, :, :]
        x, y = mu[..., :-1, :, None], mu[..., 1:, :, None]
        sx_, sy_ = sig[..., :-1, :, None], sig[..., 1:, :, None]
        w = tot(a1, tax)
        sx = tot(a1 * x, tax)
        sy = tot(a1 * y, tax)
        sxx = tot(a1 * (x * x + sx_), tax)
        sxy = tot(a1 * (x * y + Bt[..., None] * sx_), tax)
        syy = tot(a1 * (y * y + sy_), tax)
    else:
        z = np.zeros((d, C))
        trans = np.zeros((d, C, C))
        trans_from = w = sx = sy = sxx = sxy = syy = z
    return SufficientStats(n, tot(sw.nu), trans, trans_from, tot(a0), tot(a0 * mu0),
                           tot(a0 * (sig0 + mu0 ** 2)), w, sx, sy, sxx, sxy, syy)


@dataclass
class MStepResult:
    prior: RegimePrior
    dynamics: SourceDynamics
    flags: list = field(default_factory=list)


def mstep_closed_form(stats, prior, dynamics, update_prior=True, update_dynamics=True):
    """Exact maximizers of the ELBO in (pi, A, b_bar, psi_bar, B, b, psi).

    Regimes with no posterior mass keep their current values and are listed in
    ``flags`` as ``(block, component, regime)``.
    """
    flags = []
    pi, A = prior.pi.copy(), prior.A.copy()
    bb, pb = dynamics.b_bar.copy(), dynamics.psi_bar.copy()
    B, b, psi = dynamics.B.copy(), dynamics.b.copy(), dynamics.psi.copy()
    d, C = pi.shape

    if update_prior:
        pi = stats.nu / stats.n
        pi = pi / pi.sum(axis=-1, keepdims=True)
        for i in range(d):
            for l in range(C):
                if stats.trans_from[i, l] > MASS_EPS:
                    col = stats.trans[i, :, l] / stats.trans_from[i, l]
                    A[i, :, l] = col / col.sum()
                elif C > 1:
                    flags.append(("A", i, l))

    if update_dynamics:
        for i in range(d):
            for k in range(C):
                w0 = stats.w0[i, k]
                if w0 > MASS_EPS:
                    bb[i, k] = stats.s0[i, k] / w0
                    pb[i, k] = max((stats.s00[i, k] - 2 * bb[i, k] * stats.s0[i, k] + bb[i, k] ** 2 * w0) / w0,
                                   PSI_FLOOR)
                else:
                    flags.append(("initial", i, k))
                W = stats.w[i, k]
                if W <= MASS_EPS:
                    if stats.w.sum() > 0:
                        flags.append(("transition", i, k))
                    continue
                sx, sy, sxx, sxy, syy = (stats.sx[i, k], stats.sy[i, k], stats.sxx[i, k],
                                         stats.sxy[i, k], stats.syy[i, k])
                den = sxx - sx * sx / W
                if den > MASS_EPS * max(sxx, 1.0):
                    B[i, k] = (sxy - sx * sy / W) / den
                else:
                    flags.append(("B_degenerate", i, k))
                b[i, k] = (sy - B[i, k] * sx) / W
                Bk, bk = B[i, k], b[i, k]
                num = (syy - 2 * Bk * sxy + Bk ** 2 * sxx - 2 * bk * sy + 2 * Bk * bk * sx + bk ** 2 * W)
                psi[i, k] = max(num / W, PSI_FLOOR)

    return MStepResult(RegimePrior(pi, A), SourceDynamics(bb, pb, B, b, psi), flags)
