"""Filtering inference on a prefix, empirical switching and moment forecasts."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .generative import DEFAULT_LOG_RATE_CAP, Dataset
from .learning.vem import fit_proxies
from .variational import SwitchProxy, forward_moments, switch_marginals

NEG_VAR_TOL = 1e-10
EXACT = "exact"
PLUGIN = "plugin"


@dataclass
class EmpiricalSwitch:
    alpha_bar: np.ndarray  # (T, d, C)
    tau_bar: np.ndarray    # (T-1, d, C, C), [t, i, k, l] = P(u_{t+1}=k | u_t=l)
    flags: list = field(default_factory=list)

    @property
    def T(self):
        return self.alpha_bar.shape[0]

    def kernel(self, t):
        """Kernel of the transition t -> t+1 (zero-based); the last one is held beyond the grid."""
        if self.tau_bar.shape[0] == 0:
            raise ValidationError("empirical switch has no transitions")
        return self.tau_bar[min(int(t), self.tau_bar.shape[0] - 1)]

    def to_dict(self):
        return {"alpha_bar": self.alpha_bar.tolist(), "tau_bar": self.tau_bar.tolist(),
                "flags": [list(f) for f in self.flags]}

    @classmethod
    def from_dict(cls, doc):
        a = np.asarray(doc["alpha_bar"], dtype=np.float64)
        T, d, C = a.shape
        return cls(a, np.asarray(doc["tau_bar"], dtype=np.float64).reshape(T - 1, d, C, C),
                   [tuple(f) for f in doc.get("flags", [])])


def empirical_switch(proxies):
    """Uniform mixture of the regime chains of several sequences."""
    proxies = list(proxies)
    if not proxies:
        raise ValidationError("empirical switch needs at least one regime proxy")
    shapes = {p.tau.shape for p in proxies}
    if len(shapes) != 1:
        raise ValidationError(f"regime proxies differ in shape: {sorted(shapes)}")
    nu = np.stack([p.nu for p in proxies])
    tau = np.stack([p.tau for p in proxies])
    alpha = switch_marginals(SwitchProxy(nu, tau)).alpha
    alpha_bar = alpha.mean(axis=0)
    joint = np.mean(tau * alpha[:, :-1, :, None, :], axis=0)  # (T-1, d, k, l)
    denom = alpha_bar[:-1, :, None, :]
    C = nu.shape[-1]
    flags = []
    tau_bar = np.empty_like(joint)
    zero = denom[..., 0, :] <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        tau_bar[:] = joint / denom
    for t, i, l in zip(*np.nonzero(zero)):
        tau_bar[t, i, :, l] = 1.0 / C
        flags.append(("uniform_kernel_column", int(t), int(i), int(l)))
    tau_bar /= tau_bar.sum(axis=-2, keepdims=True)
    return EmpiricalSwitch(alpha_bar, tau_bar, flags)


def homogeneous_switch(prior, T):
    """Empirical-switch container built from the model's own regime prior."""
    alpha = np.empty((T,) + prior.pi.shape)
    alpha[0] = prior.pi
    for t in range(1, T):
        alpha[t] = np.einsum("ikl,il->ik", prior.A, alpha[t - 1])
    tau = np.broadcast_to(prior.A, (max(T - 1, 1),) + prior.A.shape).copy()
    return EmpiricalSwitch(alpha, tau)


def fit_filtering_proxy(model, seq, t0, config=None):
    """Free-form proxies fitted on ``x_{1:t0}`` with the model held fixed."""
    if not 1 <= int(t0) <= seq.T:
        raise ValidationError(f"t0={t0} outside [1, {seq.T}]")
    prefix = seq.truncated(int(t0))
    state = fit_proxies(model, Dataset([prefix], [f"f{k}" for k in range(seq.K)]), config)
    src, sw = state.source_proxies[0], state.switch_proxies[0]
    return src, sw, forward_moments(src)


def viterbi_map(alpha_1, kernels):
    """MAP label path per component of a time-inhomogeneous chain.

    ``alpha_1`` is (d, C); ``kernels`` is (L, d, C, C) with [t, i, k, l] =
    P(u_{t+1}=k | u_t=l). Returns an integer array (L+1, d).
    """
    alpha_1 = np.asarray(alpha_1, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    d, C = alpha_1.shape
    L = kernels.shape[0]
    with np.errstate(divide="ignore"):
        delta = np.log(alpha_1)
        logk = np.log(kernels)
    back = np.empty((L, d, C), dtype=np.int64)
    for t in range(L):
        cand = logk[t] + delta[:, None, :]  # (d, k, l)
        back[t] = np.argmax(cand, axis=-1)
        delta = np.max(cand, axis=-1)
    path = np.empty((L + 1, d), dtype=np.int64)
    path[L] = np.argmax(delta, axis=-1)
    for t in range(L - 1, -1, -1):
        path[t] = back[t][np.arange(d), path[t + 1]]
    return path


def path_log_prob(alpha_1, kernels, path):
    d = alpha_1.shape[0]
    comp = np.arange(d)
    with np.errstate(divide="ignore"):
        lp = np.log(alpha_1[comp, path[0]])
        for t in range(len(path) - 1):
            lp = lp + np.log(kernels[t][comp, path[t + 1], path[t]])
    return lp


@dataclass
class Forecast:
    alpha_hat: np.ndarray
    mu_hat: np.ndarray
    psi_hat: np.ndarray
    count_mean: np.ndarray | None
    map_path: np.ndarray | None
    mu_t0: np.ndarray
    sigma_t0: np.ndarray
    alpha_t0: np.ndarray
    flags: list = field(default_factory=list)

    @property
    def horizon(self):
        return self.mu_hat.shape[0]

    def to_dict(self):
        out = {}
        for k, v in vars(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def forecast_moments(model, mu_t0, sigma_t0, alpha_t0, empirical, horizon, t0=None, hard_regimes=False,
                     map_path=None, method=EXACT):
    """Source moments ``h = 1..horizon`` steps after the last observed time.

    ``t0`` is the prefix length; transition ``t0 - 1 + h - 1`` of ``empirical``
    drives step ``h``. ``method="exact"`` propagates regime-conditioned first
    and second moments, which is exact for the proxy-initialized chain at
    every horizon; ``method="plugin"`` plugs the unconditioned mixture moments
    back into each step. Both coincide at h = 1, for one regime, and with
    hard regimes. With ``hard_regimes`` the labels follow ``map_path`` (full
    path of length t0 + horizon).
    """
    dyn = model.dynamics
    d, C = dyn.B.shape
    H = int(horizon)
    if H < 0:
        raise ValidationError("horizon must be >= 0")
    mu0 = np.asarray(mu_t0, dtype=np.float64)
    sig0 = np.asarray(sigma_t0, dtype=np.float64)
    a0 = np.asarray(alpha_t0, dtype=np.float64)
    if method not in (EXACT, PLUGIN):
        raise ValidationError(f"unknown forecast method {method!r}")
    t0 = 1 if t0 is None else int(t0)
    alpha_hat = np.empty((H, d, C))
    mu_hat = np.empty((H, d))
    psi_hat = np.empty((H, d))
    flags = []
    comp = np.arange(d)
    if hard_regimes:
        if map_path is None or len(map_path) < t0 + H:
            raise ValidationError("hard regimes need a MAP path covering t0 + horizon")
        m, v = mu0.copy(), sig0.copy()
        for h in range(H):
            k = np.asarray(map_path[t0 - 1 + h + 1])
            alpha_hat[h] = np.eye(C)[k]
            m = dyn.B[comp, k] * m + dyn.b[comp, k]
            v = dyn.psi[comp, k] + dyn.B[comp, k] ** 2 * v
            mu_hat[h], psi_hat[h] = m, v
    elif method == EXACT:
        p = a0.copy()
        M = a0 * mu0[:, None]
        S = a0 * (sig0 + mu0 ** 2)[:, None]
        for h in range(H):
            K = empirical.kernel(t0 - 1 + h)
            p = np.einsum("ikl,il->ik", K, p)
            KM = np.einsum("ikl,il->ik", K, M)
            KS = np.einsum("ikl,il->ik", K, S)
            M = dyn.B * KM + dyn.b * p
            S = dyn.B ** 2 * KS + 2 * dyn.B * dyn.b * KM + (dyn.b ** 2 + dyn.psi) * p
            alpha_hat[h] = p
            mu_hat[h] = M.sum(-1)
            psi_hat[h] = S.sum(-1) - mu_hat[h] ** 2
    else:
        p, m, v = a0.copy(), mu0.copy(), sig0.copy()
        for h in range(H):
            p = np.einsum("ikl,il->ik", empirical.kernel(t0 - 1 + h), p)
            mean_k = dyn.B * m[:, None] + dyn.b
            mu_hat[h] = np.sum(p * mean_k, axis=-1)
            psi_hat[h] = np.sum(p * (dyn.psi + dyn.B ** 2 * v[:, None] + mean_k ** 2), axis=-1) - mu_hat[h] ** 2
            alpha_hat[h] = p
            m, v = mu_hat[h], psi_hat[h]
    if H and np.min(psi_hat) < 0:
        if np.min(psi_hat) < -NEG_VAR_TOL:
            flags.append(("negative_variance_clamped", float(np.min(psi_hat))))
        psi_hat = np.maximum(psi_hat, 0.0)
    return Forecast(alpha_hat, mu_hat, psi_hat, None, None if map_path is None else np.asarray(map_path),
                    mu0, sig0, a0, flags)


def forecast_counts(forecast, emission, offsets, log_rate_cap=DEFAULT_LOG_RATE_CAP):
    """Expected counts under the log-normal rate of each forecast step."""
    offsets = np.asarray(offsets, dtype=np.float64)
    H = forecast.mu_hat.shape[0]
    if offsets.shape != (H,):
        raise ValidationError(f"offsets must have shape ({H},)")
    G = emission.Gamma
    z = forecast.mu_hat @ G.T + 0.5 * forecast.psi_hat @ (G * G).T + offsets[:, None] + emission.eta
    if H and np.max(z) > log_rate_cap:
        raise NumericalError(f"forecast log-rate {np.max(z):.3g} exceeds cap {log_rate_cap}")
    return np.exp(z)


def hybrid_kernels(filter_switch, empirical, t0, horizon):
    """Filtering kernels up to t0, empirical kernels afterwards."""
    ks = [filter_switch.tau[t] for t in range(filter_switch.tau.shape[0])]
    ks += [empirical.kernel(t0 - 1 + h) for h in range(horizon)]
    d, C = filter_switch.nu.shape
    return np.stack(ks) if ks else np.zeros((0, d, C, C))


def forecast_sequence(model, seq, t0, horizon, empirical=None, hard_regimes=False, config=None,
                      offsets=None, method=EXACT):
    """Prefix filtering followed by an H-step forecast of moments and expected counts.

    Future offsets default to the observed ones when available, else the last
    observed offset is repeated.
    """
    t0, H = int(t0), int(horizon)
    src, sw, mom = fit_filtering_proxy(model, seq, t0, config)
    alpha = switch_marginals(sw).alpha
    if empirical is None:
        empirical = homogeneous_switch(model.prior, max(t0 + H, 2))
    path = viterbi_map(sw.nu, hybrid_kernels(sw, empirical, t0, H))
    fc = forecast_moments(model, mom.mu[-1], mom.sigma[-1], alpha[-1], empirical, H, t0=t0,
                          hard_regimes=hard_regimes, map_path=path, method=method)
    if offsets is None:
        avail = seq.offsets[t0:t0 + H]
        offsets = np.concatenate([avail, np.full(H - avail.size, seq.offsets[t0 - 1])])
    fc.count_mean = forecast_counts(fc, model.emission, offsets)
    return fc


def align_regimes(alpha_ref, alpha):
    """Per-component regime relabeling maximizing marginal-trajectory correlation.

    Both inputs are (T, d, C); returns (d, C) permutations ``perm`` such that
    ``alpha[:, i, perm[i]]`` lines up with ``alpha_ref[:, i, :]``.
    """
    alpha_ref = np.asarray(alpha_ref, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    T, d, C = alpha.shape
    out = np.empty((d, C), dtype=np.int64)
    for i in range(d):
        best, arg = -np.inf, tuple(range(C))
        for perm in itertools.permutations(range(C)):
            score = 0.0
            for k in range(C):
                a, b = alpha_ref[:, i, k], alpha[:, i, perm[k]]
                if np.std(a) > 0 and np.std(b) > 0:
                    score += float(np.corrcoef(a, b)[0, 1])
                else:
                    score -= float(np.mean(np.abs(a - b)))
            if score > best:
                best, arg = score, perm
        out[i] = arg
    return out
