"""Structured variational family: Gaussian Markov-chain source proxies and
Markov-chain regime proxies.

All containers accept arbitrary leading batch axes, so a stack of ``n``
sequences of equal length is represented by arrays with a leading ``n``
axis. Zero-based time: ``B_tilde[..., t, i]`` links ``s_t`` to ``s_{t+1}``
and ``tau[..., t, i, k, l]`` is q(u_{t+1} = k | u_t = l).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError, ValidationError

AR = "AR"
MEAN_FIELD = "MeanField"
_LOG_2PIE = np.log(2.0 * np.pi * np.e)


@dataclass
class SourceProxy:
    m: np.ndarray
    B_tilde: np.ndarray
    b_tilde: np.ndarray
    psi_tilde: np.ndarray
    mode: str = AR

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        self.B_tilde = np.asarray(self.B_tilde, dtype=np.float64)
        self.b_tilde = np.asarray(self.b_tilde, dtype=np.float64)
        self.psi_tilde = np.asarray(self.psi_tilde, dtype=np.float64)
        lead = self.psi_tilde.shape[:-2]
        T, d = self.psi_tilde.shape[-2:]
        if (self.m.shape != lead + (d,) or self.B_tilde.shape != lead + (T - 1, d)
                or self.b_tilde.shape != self.B_tilde.shape):
            raise ValidationError("source proxy blocks have inconsistent shapes")
        if self.mode not in (AR, MEAN_FIELD):
            raise ValidationError(f"unknown proxy mode {self.mode!r}")
        if np.any(self.psi_tilde <= 0):
            raise ValidationError("psi_tilde must be strictly positive")
        if self.mode == MEAN_FIELD and np.any(self.B_tilde != 0):
            raise ValidationError("mean-field proxy requires B_tilde == 0")

    @property
    def T(self):
        return self.psi_tilde.shape[-2]

    @property
    def d(self):
        return self.psi_tilde.shape[-1]

    def __getitem__(self, idx):
        return SourceProxy(self.m[idx], self.B_tilde[idx], self.b_tilde[idx], self.psi_tilde[idx], self.mode)

    def sample(self, size, rng):
        """Exact draws ``(size, ..., T, d)`` from the Gaussian chain."""
        shape = (size,) + self.psi_tilde.shape
        z = rng.standard_normal(shape)
        s = np.empty(shape)
        sd = np.sqrt(self.psi_tilde)
        s[..., 0, :] = self.m + sd[..., 0, :] * z[..., 0, :]
        for t in range(1, self.T):
            s[..., t, :] = (self.B_tilde[..., t - 1, :] * s[..., t - 1, :] + self.b_tilde[..., t - 1, :]
                            + sd[..., t, :] * z[..., t, :])
        return s


@dataclass
class SwitchProxy:
    nu: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=np.float64)
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.tau.shape[-2:] != (self.nu.shape[-1],) * 2 or self.tau.shape[-3] != self.nu.shape[-2]:
            raise ValidationError(f"nu {self.nu.shape} and tau {self.tau.shape} are inconsistent")
        if np.any(self.nu < 0) or np.any(self.tau < 0):
            raise ValidationError("regime proxy entries must be nonnegative")
        if (np.max(np.abs(self.nu.sum(-1) - 1.0), initial=0.0) > 1e-12
                or np.max(np.abs(self.tau.sum(-2) - 1.0), initial=0.0) > 1e-12):
            raise ValidationError("nu rows and tau columns must sum to 1")

    @property
    def T(self):
        return self.tau.shape[-4] + 1

    def __getitem__(self, idx):
        return SwitchProxy(self.nu[idx], self.tau[idx])

    def sample(self, size, rng):
        """Draw ``(size, ..., T, d)`` label paths (used by Monte Carlo checks)."""
        C = self.nu.shape[-1]
        shape = (size,) + self.nu.shape[:-1]
        T = self.T
        out = np.empty((size,) + self.nu.shape[:-2] + (T, self.nu.shape[-2]), dtype=np.int64)
        r = rng.random((T,) + shape)
        cdf = np.cumsum(np.broadcast_to(self.nu, shape + (C,)), axis=-1)
        lab = np.minimum((r[0][..., None] >= cdf).sum(-1), C - 1)
        out[..., 0, :] = lab
        for t in range(1, T):
            cols = np.cumsum(self.tau[..., t - 1, :, :, :], axis=-2)  # (..., d, C_to, C_from)
            cols = np.broadcast_to(cols, shape + (C, C))
            cdf = np.take_along_axis(cols, lab[..., None, None], axis=-1)[..., 0]
            lab = np.minimum((r[t][..., None] >= cdf).sum(-1), C - 1)
            out[..., t, :] = lab
        return out


@dataclass
class SourceMoments:
    mu: np.ndarray
    sigma: np.ndarray
    lag1: np.ndarray


@dataclass
class SwitchMarginals:
    alpha: np.ndarray


def forward_moments(proxy):
    """Marginal means, variances and lag-one covariances of a source proxy."""
    m, Bt, bt, psi = proxy.m, proxy.B_tilde, proxy.b_tilde, proxy.psi_tilde
    T = psi.shape[-2]
    mu = np.empty_like(psi)
    sig = np.empty_like(psi)
    mu[..., 0, :] = m
    sig[..., 0, :] = psi[..., 0, :]
    for t in range(1, T):
        mu[..., t, :] = Bt[..., t - 1, :] * mu[..., t - 1, :] + bt[..., t - 1, :]
        sig[..., t, :] = psi[..., t, :] + Bt[..., t - 1, :] ** 2 * sig[..., t - 1, :]
    return SourceMoments(mu, sig, Bt * sig[..., :-1, :])


def switch_marginals(proxy):
    nu, tau = proxy.nu, proxy.tau
    T = tau.shape[-4] + 1
    alpha = np.empty(nu.shape[:-2] + (T,) + nu.shape[-2:])
    alpha[..., 0, :, :] = nu
    for t in range(1, T):
        alpha[..., t, :, :] = np.einsum("...kl,...l->...k", tau[..., t - 1, :, :, :], alpha[..., t - 1, :, :])
    return SwitchMarginals(alpha)


def source_entropy(proxy):
    """Entropy of the source proxy summed over components (per batch entry)."""
    T, d = proxy.psi_tilde.shape[-2:]
    return 0.5 * T * d * _LOG_2PIE + 0.5 * np.sum(np.log(proxy.psi_tilde), axis=(-2, -1))


def log_evidence_terms(model, moments):
    """Unshifted log evidence ``log e_t^{(i)}(k)``, shape ``(..., T, d, C)``.

    Equals E_q[log N(s_t; regime-k prior)] + 0.5 log(2 pi).
    """
    dyn = model.dynamics
    mu, sig, lag = moments.mu, moments.sigma, moments.lag1
    T = mu.shape[-2]
    out = np.empty(mu.shape + (dyn.B.shape[-1],))
    out[..., 0, :, :] = (-0.5 * np.log(dyn.psi_bar)
                         - (sig[..., 0, :, None] + (mu[..., 0, :, None] - dyn.b_bar) ** 2) / (2.0 * dyn.psi_bar))
    if T > 1:
        B, b, psi = dyn.B, dyn.b, dyn.psi
        resid = mu[..., 1:, :, None] - B * mu[..., :-1, :, None] - b
        quad = (sig[..., 1:, :, None] + B ** 2 * sig[..., :-1, :, None] + resid ** 2
                - 2.0 * B * lag[..., :, :, None])
        out[..., 1:, :, :] = -0.5 * np.log(psi) - quad / (2.0 * psi)
    return out


def evidence_terms(model, moments):
    """Evidence terms exponentiated after a per-(t, i) max shift."""
    le = log_evidence_terms(model, moments)
    if not np.all(np.isfinite(le)):
        raise NumericalError("non-finite evidence term")
    return np.exp(le - le.max(axis=-1, keepdims=True))


def cavi_switch_update(model, moments):
    """Optimal regime proxy given the source moments.

    Normalizes the chain proportional to
    pi(u_1) e_1(u_1) prod_t a(u_{t+1} | u_t) e_{t+1}(u_{t+1}) with log-space
    backward messages and returns its forward-kernel form ``(nu, tau)``.
    """
    le = log_evidence_terms(model, moments)
    if not np.all(np.isfinite(le)):
        raise NumericalError("non-finite evidence term in regime update")
    T = le.shape[-3]
    with np.errstate(divide="ignore"):
        log_A = np.log(model.prior.A)  # (d, k, l)
        log_pi = np.log(model.prior.pi)
    log_beta = np.zeros_like(le)
    log_tau = np.empty(le.shape[:-3] + (T - 1,) + le.shape[-2:] + (le.shape[-1],))
    for t in range(T - 2, -1, -1):
        joint = log_A + (le[..., t + 1, :, :] + log_beta[..., t + 1, :, :])[..., :, None]
        lb = logsumexp(joint, axis=-2)
        if not np.all(np.isfinite(lb)):
            _raise_underflow(lb, t, comp_axis=-2)
        log_beta[..., t, :, :] = lb
        log_tau[..., t, :, :, :] = joint - lb[..., None, :]
    log_nu = log_pi + le[..., 0, :, :] + log_beta[..., 0, :, :]
    norm = logsumexp(log_nu, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        _raise_underflow(norm[..., 0], -1, comp_axis=-1)
    nu = np.exp(log_nu - norm)
    nu /= nu.sum(axis=-1, keepdims=True)
    tau = np.exp(log_tau)
    tau /= tau.sum(axis=-2, keepdims=True)
    return SwitchProxy(nu, tau)


def _raise_underflow(values, t, comp_axis):
    bad = np.argwhere(~np.isfinite(values))[0]
    i = int(bad[comp_axis])
    where = "initial distribution" if t < 0 else f"t={t}"
    raise NumericalError(f"regime message underflow at {where}, component i={i}")
