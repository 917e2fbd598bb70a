"""Variational EM loop with free-form per-sequence source proxies."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import logsumexp

from ..errors import NumericalError, ValidationError
from ..generative import Dims, Emission, ModelParams, RegimePrior, SourceDynamics
from ..variational import AR, MEAN_FIELD, SourceProxy, SwitchProxy, cavi_switch_update, forward_moments, switch_marginals
from .elbo import elbo, elbo_value_and_grad, free_from_psi, psi_from_free
from .mstep import mstep_closed_form, sufficient_stats
from .optim import AdamConfig, AdamState, adam_step, project_gamma_columns

CHECKPOINT_VERSION = 1
INIT_PSI_TILDE = 0.1


@dataclass
class FitConfig:
    epochs: int = 3000
    learning_rate: float = 0.03
    weight_decay: float = 1e-4
    grad_clip_norm: float = 100.0
    batch_size: int | None = None
    convergence_rel_tol: float = 1e-7
    convergence_window: int = 25
    proxy_mode: str = AR
    gamma_normalize: bool = True
    seed: int = 0
    cosine_decay: bool = False
    update_model: bool = True
    gradient_steps: bool = True
    mstep: bool = True

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if int(self.convergence_window) < 1:
            raise ValidationError("convergence_window must be >= 1")
        if self.proxy_mode not in (AR, MEAN_FIELD):
            raise ValidationError(f"unknown proxy_mode {self.proxy_mode!r}")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ValidationError("batch_size must be >= 1 or None")

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValidationError(f"unknown FitConfig fields: {sorted(unknown)}")
        return cls(**doc)

    def adam(self):
        return AdamConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                          grad_clip_norm=self.grad_clip_norm)


@dataclass
class FitState:
    model: ModelParams
    source_proxies: list
    switch_proxies: list
    elbo_trace: list = field(default_factory=list)
    optimizer: AdamState = field(default_factory=AdamState)
    ids: list = field(default_factory=list)
    epochs_run: int = 0
    converged: bool = False
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "model": self.model.to_dict(),
            "ids": list(self.ids),
            "source_proxies": [{"m": p.m.tolist(), "B_tilde": p.B_tilde.tolist(), "b_tilde": p.b_tilde.tolist(),
                                "psi_tilde": p.psi_tilde.tolist(), "mode": p.mode} for p in self.source_proxies],
            "switch_proxies": [{"nu": q.nu.tolist(), "tau": q.tau.tolist()} for q in self.switch_proxies],
            "elbo_trace": [float(v) for v in self.elbo_trace],
            "optimizer": self.optimizer.to_dict(),
            "epochs_run": self.epochs_run,
            "converged": self.converged,
            "flags": [list(f) for f in self.flags],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported fit-state version {doc.get('version')!r}")
        model = ModelParams.from_dict(doc["model"])
        d = model.dims.d
        C = model.dims.C
        src = []
        for p in doc["source_proxies"]:
            T = len(p["psi_tilde"])
            src.append(SourceProxy(np.asarray(p["m"]), np.asarray(p["B_tilde"]).reshape(T - 1, d),
                                   np.asarray(p["b_tilde"]).reshape(T - 1, d), np.asarray(p["psi_tilde"]),
                                   p["mode"]))
        sw = []
        for q in doc["switch_proxies"]:
            nu = np.asarray(q["nu"])
            sw.append(SwitchProxy(nu, np.asarray(q["tau"]).reshape(-1, d, C, C)))
        return cls(model, src, sw, list(doc["elbo_trace"]), AdamState.from_dict(doc["optimizer"]),
                   list(doc["ids"]), int(doc["epochs_run"]), bool(doc["converged"]),
                   [tuple(f) for f in doc.get("flags", [])])


def save_fit_state(state, path):
    with open(path, "w") as fh:
        json.dump(state.to_dict(), fh)


def load_fit_state(path):
    with open(path) as fh:
        return FitState.from_dict(json.load(fh))


def init_model(dataset, d, C, rng, gamma_normalize=True):
    """Starting point of a fit.

    Gaussian mixing columns, offset-corrected log mean counts for ``eta``,
    B=0.5, b=0, unit variances and a uniform regime prior. With several
    regimes the AR coefficients are spread around 0.5 so that regimes are not
    exchangeable at the start.
    """
    K = dataset.sequences[0].K
    if not K >= d >= 1 or C < 1:
        raise ValidationError(f"need K >= d >= 1 and C >= 1 (K={K}, d={d}, C={C})")
    G = rng.standard_normal((K, d))
    if gamma_normalize:
        G = project_gamma_columns(G)
    tot = sum(s.counts.sum(axis=0) for s in dataset).astype(np.float64)
    log_expo = logsumexp(np.concatenate([s.offsets for s in dataset]))
    eta = np.log(np.maximum(tot, 0.5)) - log_expo
    B = np.full((d, C), 0.5)
    if C > 1:
        B = B + np.linspace(-0.3, 0.3, C)
    dyn = SourceDynamics(np.zeros((d, C)), np.ones((d, C)), B, np.zeros((d, C)), np.ones((d, C)))
    return ModelParams(Dims(K, d, C, dataset.sequences[0].T), RegimePrior.uniform(d, C), dyn,
                       Emission(G, eta, normalized=gamma_normalize))


def init_source_proxy(model, counts, offsets, mode=AR):
    """Least-squares source estimate from log counts, used as proxy means."""
    y = np.log(np.asarray(counts, dtype=np.float64) + 0.5) - offsets[..., None] - model.emission.eta
    s = y @ np.linalg.pinv(model.emission.Gamma).T
    T, d = s.shape[-2:]
    lead = s.shape[:-2]
    return SourceProxy(s[..., 0, :].copy(), np.zeros(lead + (T - 1, d)), s[..., 1:, :].copy(),
                       np.full(lead + (T, d), INIT_PSI_TILDE), mode)


class _Group:
    """Sequences of equal length stacked along a leading axis."""

    def __init__(self, T, index, counts, offsets):
        self.T = T
        self.index = np.asarray(index)
        self.counts = counts
        self.offsets = offsets
        self.keys = tuple(f"{name}@{T}" for name in ("m", "Bt", "bt", "rho"))

    def proxy(self, params, mode, rows=None):
        m, Bt, bt, rho = (params[k] for k in self.keys)
        if rows is not None:
            m, Bt, bt, rho = m[rows], Bt[rows], bt[rows], rho[rows]
        if mode == MEAN_FIELD:
            Bt = np.zeros_like(Bt)
        return SourceProxy(m, Bt, bt, psi_from_free(rho), mode)


def _make_groups(dataset):
    by_T = {}
    for j, seq in enumerate(dataset):
        by_T.setdefault(seq.T, []).append(j)
    groups = []
    for T in sorted(by_T):
        idx = by_T[T]
        groups.append(_Group(T, idx, np.stack([dataset[j].counts for j in idx]).astype(np.float64),
                             np.stack([dataset[j].offsets for j in idx])))
    return groups


def _params_from_proxies(groups, proxies):
    params = {}
    for g in groups:
        p = [proxies[j] for j in g.index]
        params[g.keys[0]] = np.stack([q.m for q in p])
        params[g.keys[1]] = np.stack([q.B_tilde for q in p])
        params[g.keys[2]] = np.stack([q.b_tilde for q in p])
        params[g.keys[3]] = free_from_psi(np.stack([q.psi_tilde for q in p]))
    return params


def _batches(n, batch_size, rng):
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + batch_size]) for i in range(0, n, batch_size)]


def fit_vem(dataset, d=None, C=None, config=None, init=None, rng=None):
    """Variational EM.

    ``init`` may be None (random initialization from ``rng``/``config.seed``),
    a ModelParams, or a FitState to resume. Returns a FitState.
    """
    config = FitConfig() if config is None else config
    if len(dataset) == 0:
        raise ValidationError("cannot fit an empty dataset")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    groups = _make_groups(dataset)
    n = len(dataset)

    if isinstance(init, FitState):
        state = init
        if list(state.ids) != list(dataset.ids):
            raise ValidationError("fit state does not match the dataset sequence ids")
        model = state.model
        params = _params_from_proxies(groups, state.source_proxies)
    else:
        if isinstance(init, ModelParams):
            model = init
        else:
            if d is None or C is None:
                raise ValidationError("d and C are required without an initial model")
            model = init_model(dataset, d, C, rng, config.gamma_normalize)
        if model.emission.Gamma.shape[0] != dataset.sequences[0].K:
            raise ValidationError("model feature count does not match the data")
        proxies = [None] * n
        for g in groups:
            src = init_source_proxy(model, g.counts, g.offsets, config.proxy_mode)
            for r, j in enumerate(g.index):
                proxies[j] = src[r]
        params = _params_from_proxies(groups, proxies)
        state = FitState(model, [], [], ids=list(dataset.ids))
    params["Gamma"] = model.emission.Gamma.copy()
    params["eta"] = model.emission.eta.copy()

    adam_cfg = config.adam()
    opt = state.optimizer
    trace = list(state.elbo_trace)
    flags = list(state.flags)
    start = state.epochs_run
    converged = False

    for epoch in range(start, start + int(config.epochs)):
        lr = config.learning_rate
        if config.cosine_decay:
            lr = lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - start) / config.epochs))
        epoch_elbo = 0.0
        try:
            for batch in _batches(n, config.batch_size, rng):
                grads = {k: np.zeros_like(v) for k, v in params.items()}
                stats = None
                pending = []
                for g in groups:
                    rows = np.flatnonzero(np.isin(g.index, batch))
                    if rows.size == 0:
                        continue
                    src = g.proxy(params, config.proxy_mode, rows)
                    sw = cavi_switch_update(model, forward_moments(src))
                    alpha = switch_marginals(sw).alpha
                    vals, gb = elbo_value_and_grad(model, src, sw, g.counts[rows], g.offsets[rows], alpha=alpha)
                    epoch_elbo += float(np.sum(vals))
                    grads["Gamma"] -= gb.d_Gamma
                    grads["eta"] -= gb.d_eta
                    for key, gv in zip(g.keys, (gb.d_m, gb.d_B_tilde, gb.d_b_tilde, gb.d_log_psi_tilde)):
                        grads[key][rows] -= gv
                    pending.append((g, rows, sw, alpha))
                if not config.update_model:
                    grads.pop("Gamma")
                    grads.pop("eta")
                if config.gradient_steps:
                    sub = {k: params[k] for k in grads}
                    params.update(adam_step(sub, grads, opt, adam_cfg, lr=lr))
                    for k, v in params.items():
                        if not np.all(np.isfinite(v)) or (k.startswith("rho") and np.any(v > 700.0)):
                            raise NumericalError(f"non-finite parameter block {k!r} after gradient step")
                    if config.proxy_mode == MEAN_FIELD:
                        for g in groups:
                            params[g.keys[1]] = np.zeros_like(params[g.keys[1]])
                    if config.update_model:
                        G = params["Gamma"]
                        if config.gamma_normalize:
                            G = project_gamma_columns(G)
                            params["Gamma"] = G
                        model = model.replace(emission=Emission(G, params["eta"].copy(),
                                                                normalized=config.gamma_normalize))
                if config.update_model and config.mstep:
                    for g, rows, sw, alpha in pending:
                        st = sufficient_stats(g.proxy(params, config.proxy_mode, rows), sw, alpha=alpha)
                        stats = st if stats is None else stats + st
                    res = mstep_closed_form(stats.scaled(n / len(batch)), model.prior, model.dynamics)
                    model = model.replace(prior=res.prior, dynamics=res.dynamics)
                    for f in res.flags:
                        if f not in flags:
                            flags.append(f)
        except NumericalError as exc:
            raise NumericalError(f"fit diverged at epoch {epoch}: {exc}") from exc
        if not math.isfinite(epoch_elbo):
            raise NumericalError(f"fit diverged at epoch {epoch}: non-finite ELBO")
        trace.append(epoch_elbo)
        w = int(config.convergence_window)
        if len(trace) > w:
            ref = trace[-1 - w]
            if abs(trace[-1] - ref) <= config.convergence_rel_tol * max(abs(ref), 1e-12):
                converged = True
                state.epochs_run = epoch + 1
                break
        state.epochs_run = epoch + 1

    src_list = [None] * n
    for g in groups:
        src = g.proxy(params, config.proxy_mode)
        for r, j in enumerate(g.index):
            src_list[j] = src[r]
    # regime proxies consistent with the final model and source proxies
    sw_list = [None] * n
    for g in groups:
        sw = cavi_switch_update(model, forward_moments(g.proxy(params, config.proxy_mode)))
        for r, j in enumerate(g.index):
            sw_list[j] = sw[r]
    return FitState(model, src_list, sw_list, trace, opt, list(dataset.ids), state.epochs_run, converged, flags)


def fit_proxies(model, dataset, config=None):
    """Optimize proxies only, with the model frozen."""
    config = FitConfig() if config is None else config
    cfg = FitConfig(**{**asdict(config), "update_model": False})
    return fit_vem(dataset, config=cfg, init=model)


def dataset_elbo(model, state, dataset):
    """Full-dataset ELBO of a fit state (sum over sequences)."""
    return float(sum(elbo(model, s, q, seq) for s, q, seq in zip(state.source_proxies, state.switch_proxies, dataset)))
