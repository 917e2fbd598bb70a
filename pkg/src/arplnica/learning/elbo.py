"""Closed-form ELBO and its exact gradient.

Batched entry points take stacked arrays (``counts (..., T, K)``,
``offsets (..., T)``) together with batched proxies and return one value per
sequence. The gradient is a hand-written reverse pass through the forward
moment recursions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

from ..errors import NumericalError
from ..variational import MEAN_FIELD, forward_moments, source_entropy, switch_marginals

PSI_FLOOR = 1e-8
_LOG_2PI = np.log(2.0 * np.pi)


def psi_from_free(rho):
    """Positive variance from its unconstrained log-parameter."""
    return PSI_FLOOR + np.exp(rho)


def free_from_psi(psi):
    return np.log(np.maximum(np.asarray(psi, dtype=np.float64) - PSI_FLOOR, 1e-300))


@dataclass
class GradientBundle:
    """Gradients of the ELBO (ascent direction).

    ``d_psi_tilde`` is taken with respect to the variance itself and
    ``d_log_psi_tilde`` with respect to the unconstrained parameter used by
    the optimizer.
    """

    d_Gamma: np.ndarray
    d_eta: np.ndarray
    d_m: np.ndarray
    d_B_tilde: np.ndarray
    d_b_tilde: np.ndarray
    d_psi_tilde: np.ndarray
    d_log_psi_tilde: np.ndarray

    def check_finite(self):
        for name, val in vars(self).items():
            if not np.all(np.isfinite(val)):
                raise NumericalError(f"non-finite gradient in {name}")


def _check(name, val):
    if not np.all(np.isfinite(val)):
        raise NumericalError(f"non-finite value in ELBO term '{name}'")
    return val


def _emission_parts(model, mu, sig, counts, offsets):
    G, eta = model.emission.Gamma, model.emission.eta
    lin = mu @ G.T + offsets[..., None] + eta
    with np.errstate(over="ignore"):
        lam = np.exp(lin + 0.5 * (sig @ (G * G).T))
    _check("emission", lam)
    return lin, lam


def regime_kl(model, sw, alpha):
    """KL(q(u) || p(u)) summed over components, per batch entry."""
    pi, A = model.prior.pi, model.prior.A
    kl = np.sum(xlogy(sw.nu, sw.nu) - xlogy(sw.nu, pi), axis=(-2, -1))
    if sw.tau.shape[-4] > 0:
        w = sw.tau * alpha[..., :-1, :, None, :]
        kl = kl + np.sum(xlogy(w, sw.tau) - xlogy(w, A), axis=(-4, -3, -2, -1))
    return kl


def elbo_terms(model, src, sw, counts, offsets, moments=None, alpha=None):
    """Every ELBO term, one value per batch entry.

    Returns a dict with keys ``emission``, ``regime_kl``, ``entropy``,
    ``initial``, ``transition`` and ``total``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    mom = forward_moments(src) if moments is None else moments
    alpha = switch_marginals(sw).alpha if alpha is None else alpha
    dyn = model.dynamics
    mu, sig = mom.mu, mom.sigma

    lin, lam = _emission_parts(model, mu, sig, counts, offsets)
    emission = np.sum(counts * lin - lam - gammaln(counts + 1.0), axis=(-2, -1))
    kl = _check("regime_kl", regime_kl(model, sw, alpha))
    ent = _check("entropy", source_entropy(src))

    a0 = alpha[..., 0, :, :]
    init = -0.5 * np.sum(
        a0 * (_LOG_2PI + np.log(dyn.psi_bar)
              + (sig[..., 0, :, None] + (mu[..., 0, :, None] - dyn.b_bar) ** 2) / dyn.psi_bar),
        axis=(-2, -1))
    if mu.shape[-2] > 1:
        B, b, psi = dyn.B, dyn.b, dyn.psi
        r = mu[..., 1:, :, None] - B * mu[..., :-1, :, None] - b
        quad = (r ** 2 + sig[..., 1:, :, None]
                + B * (B - 2.0 * src.B_tilde[..., None]) * sig[..., :-1, :, None])
        trans = -0.5 * np.sum(alpha[..., 1:, :, :] * (_LOG_2PI + np.log(psi) + quad / psi), axis=(-3, -2, -1))
    else:
        trans = np.zeros_like(init)
    _check("initial", init)
    _check("transition", trans)
    total = emission - kl + ent + init + trans
    return {"emission": emission, "regime_kl": kl, "entropy": ent, "initial": init,
            "transition": trans, "total": total}


def elbo_batch(model, src, sw, counts, offsets):
    return elbo_terms(model, src, sw, counts, offsets)["total"]


def elbo(model, src, sw, seq):
    """Closed-form ELBO of one sequence."""
    return float(elbo_terms(model, src, sw, seq.counts, seq.offsets)["total"])


def elbo_value_and_grad(model, src, sw, counts, offsets, alpha=None):
    """Per-sequence ELBO values and the gradient bundle.

    ``d_Gamma`` and ``d_eta`` are summed over the batch; source-proxy
    gradients keep the batch axes. The regime proxy is held fixed.
    """
    counts = np.asarray(counts, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    mom = forward_moments(src)
    alpha = switch_marginals(sw).alpha if alpha is None else alpha
    values = elbo_terms(model, src, sw, counts, offsets, moments=mom, alpha=alpha)["total"]

    G = model.emission.Gamma
    dyn = model.dynamics
    mu, sig = mom.mu, mom.sigma
    Bt, psi_t = src.B_tilde, src.psi_tilde
    T = mu.shape[-2]

    _, lam = _emission_parts(model, mu, sig, counts, offsets)
    resid = counts - lam
    g_mu = resid @ G
    g_sig = -0.5 * (lam @ (G * G))
    K, d = G.shape
    d_Gamma = (resid.reshape(-1, K).T @ mu.reshape(-1, d)) - (lam.reshape(-1, K).T @ sig.reshape(-1, d)) * G
    d_eta = resid.reshape(-1, resid.shape[-1]).sum(axis=0)

    a0 = alpha[..., 0, :, :]
    g_mu[..., 0, :] -= np.sum(a0 * (mu[..., 0, :, None] - dyn.b_bar) / dyn.psi_bar, axis=-1)
    g_sig[..., 0, :] -= 0.5 * np.sum(a0 / dyn.psi_bar, axis=-1)

    d_Bt = np.zeros_like(Bt)
    if T > 1:
        B, b = dyn.B, dyn.b
        w = alpha[..., 1:, :, :] / dyn.psi
        r = mu[..., 1:, :, None] - B * mu[..., :-1, :, None] - b
        wr = np.sum(w * r, axis=-1)
        g_mu[..., 1:, :] -= wr
        g_mu[..., :-1, :] += np.sum(w * r * B, axis=-1)
        g_sig[..., 1:, :] -= 0.5 * np.sum(w, axis=-1)
        g_sig[..., :-1, :] -= 0.5 * np.sum(w * B * (B - 2.0 * Bt[..., None]), axis=-1)
        d_Bt += np.sum(w * B, axis=-1) * sig[..., :-1, :]

    # reverse pass through mu_t = Bt mu_{t-1} + bt, sig_t = psi_t + Bt^2 sig_{t-1}
    d_bt = np.empty_like(Bt)
    d_psi = np.empty_like(psi_t)
    for t in range(T - 1, 0, -1):
        gm, gs = g_mu[..., t, :], g_sig[..., t, :]
        d_bt[..., t - 1, :] = gm
        d_Bt[..., t - 1, :] += gm * mu[..., t - 1, :] + 2.0 * gs * Bt[..., t - 1, :] * sig[..., t - 1, :]
        d_psi[..., t, :] = gs
        g_mu[..., t - 1, :] += gm * Bt[..., t - 1, :]
        g_sig[..., t - 1, :] += gs * Bt[..., t - 1, :] ** 2
    d_m = g_mu[..., 0, :].copy()
    d_psi[..., 0, :] = g_sig[..., 0, :]
    d_psi += 0.5 / psi_t
    if src.mode == MEAN_FIELD:
        d_Bt[...] = 0.0
    bundle = GradientBundle(d_Gamma, d_eta, d_m, d_Bt, d_bt, d_psi, d_psi * (psi_t - PSI_FLOOR))
    bundle.check_finite()
    return values, bundle


def elbo_grad(model, src, sw, seq):
    """Exact ELBO gradient for one sequence."""
    _, bundle = elbo_value_and_grad(model, src, sw, seq.counts, seq.offsets)
    return bundle
