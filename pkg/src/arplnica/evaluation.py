"""Recovery and fit diagnostics."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .generative import Dataset, sample_latent_batch

MAX_BRUTE_FORCE_D = 9
SW_DEFAULT_PROJECTIONS = 512
SW_PROJECTION_SEED = 20240607
SW_QUANTILE_GRID = 1024
DEFAULT_GAP_THRESHOLD = 1e-3


def cosine_similarity(v, w):
    v = np.asarray(v, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    nv, nw = np.linalg.norm(v), np.linalg.norm(w)
    if nv == 0 or nw == 0:
        raise ValidationError("cosine similarity of a zero vector is undefined")
    return float(v @ w / (nv * nw))


@dataclass
class Alignment:
    """``permutation[i]`` is the estimate column matched to reference column ``i``."""

    permutation: np.ndarray
    signs: np.ndarray
    per_column_cosine: np.ndarray
    mean_cosine: float

    def apply(self, estimate):
        """Estimate columns reordered and sign-flipped onto the reference."""
        return np.asarray(estimate)[:, self.permutation] * self.signs

    def to_dict(self):
        return {"permutation": self.permutation.tolist(), "signs": self.signs.tolist(),
                "per_column_cosine": self.per_column_cosine.tolist(), "mean_cosine": self.mean_cosine}


_PERM_CACHE = {}


def _all_permutations(d):
    if d not in _PERM_CACHE:
        _PERM_CACHE[d] = np.array(list(itertools.permutations(range(d))), dtype=np.intp).reshape(-1, d)
    return _PERM_CACHE[d]


def align_mixing(estimate, reference, hungarian=False):
    """Best signed permutation of ``estimate`` columns onto ``reference``.

    Exhaustive over all d! permutations; signs follow the matched inner
    products.
    """
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 2:
        raise ValidationError(f"mixing shapes differ: {est.shape} vs {ref.shape}")
    d = est.shape[1]
    if hungarian:
        raise ValidationError("Hungarian alignment is reserved and not available in this version")
    if d > MAX_BRUTE_FORCE_D:
        raise ValidationError(f"d={d} is too large for exhaustive alignment (max {MAX_BRUTE_FORCE_D}); "
                              "a Hungarian fallback (hungarian=True) is reserved for this case")
    ne = np.linalg.norm(est, axis=0)
    nr = np.linalg.norm(ref, axis=0)
    if np.any(ne == 0) or np.any(nr == 0):
        raise ValidationError("mixing matrices must not have zero columns")
    cos = (est / ne).T @ (ref / nr)  # cos[j, i]: estimate j vs reference i
    perms = _all_permutations(d)
    scores = np.abs(cos)[perms, np.arange(d)].sum(axis=1)
    perm = perms[int(np.argmax(scores))].copy()
    matched = cos[perm, np.arange(d)]
    signs = np.where(matched < 0, -1, 1).astype(np.int64)
    per_col = np.abs(matched)
    return Alignment(perm, signs, per_col, float(per_col.mean()))


def _as_points(ds):
    if isinstance(ds, Dataset):
        arr = [s.counts for s in ds]
    elif isinstance(ds, np.ndarray):
        arr = ds
    else:
        arr = list(ds)
    if len(arr) == 0:
        raise ValidationError("sliced Wasserstein needs nonempty samples")
    pts = np.asarray(np.stack([np.asarray(a, dtype=np.float64).ravel() for a in arr]) if not isinstance(arr, np.ndarray)
                     else arr.reshape(arr.shape[0], -1), dtype=np.float64)
    return pts


def random_directions(dim, n_projections, rng):
    v = rng.standard_normal((n_projections, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _w2_squared_1d(a, b):
    if a.shape[0] == b.shape[0]:
        return np.mean((np.sort(a, axis=0) - np.sort(b, axis=0)) ** 2, axis=0)
    q = (np.arange(SW_QUANTILE_GRID) + 0.5) / SW_QUANTILE_GRID
    qa = np.quantile(a, q, axis=0, method="inverted_cdf")
    qb = np.quantile(b, q, axis=0, method="inverted_cdf")
    return np.mean((qa - qb) ** 2, axis=0)


def sliced_wasserstein(dsA, dsB, n_projections=SW_DEFAULT_PROJECTIONS, rng=None, directions=None):
    """Order-2 sliced Wasserstein distance between two trajectory samples.

    Each trajectory is flattened to one point. Returns the square root of the
    mean squared 1-D Wasserstein-2 distance over random unit directions.
    """
    a, b = _as_points(dsA), _as_points(dsB)
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"point dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if directions is None:
        rng = np.random.default_rng(SW_PROJECTION_SEED) if rng is None else rng
        directions = random_directions(a.shape[1], int(n_projections), rng)
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    w2 = _w2_squared_1d(a @ directions.T, b @ directions.T)
    return float(math.sqrt(max(float(np.mean(w2)), 0.0)))


def gram_coherence(Gamma):
    G = np.asarray(Gamma, dtype=np.float64)
    return np.abs(G.T @ G)


def max_coherence(Gamma):
    g = gram_coherence(Gamma)
    n = np.linalg.norm(Gamma, axis=0)
    g = g / np.outer(n, n)
    np.fill_diagonal(g, 0.0)
    return float(g.max()) if g.size > 1 else 0.0


@dataclass
class RecoveryReport:
    alignment: Alignment
    sliced_wasserstein: float
    gram_coherence: np.ndarray
    runtime_seconds: float = 0.0

    def to_dict(self):
        return {"alignment": self.alignment.to_dict(), "sliced_wasserstein": self.sliced_wasserstein,
                "gram_coherence": self.gram_coherence.tolist(), "runtime_seconds": self.runtime_seconds}


def recovery_report(fitted_model, oracle_model, fitted_data, oracle_data, n_projections=SW_DEFAULT_PROJECTIONS,
                    runtime_seconds=0.0):
    al = align_mixing(fitted_model.emission.Gamma, oracle_model.emission.Gamma)
    sw = sliced_wasserstein(fitted_data, oracle_data, n_projections)
    return RecoveryReport(al, sw, gram_coherence(fitted_model.emission.Gamma), runtime_seconds)


# identifiability conditions

@dataclass
class IdentifiabilityReport:
    entries: list
    min_gap: float
    min_abs_diag: float
    best: tuple
    lag_condition_met: bool
    B_distinct: object = None
    flags: list = field(default_factory=list)

    @property
    def passed(self):
        return self.lag_condition_met

    def entry(self, t0, l0):
        for e in self.entries:
            if e["t0"] == t0 and e["l0"] == l0:
                return e
        raise KeyError((t0, l0))

    def to_dict(self):
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _pairwise_gap(v):
    v = np.asarray(v, dtype=np.float64)
    if v.size < 2:
        return math.inf
    diff = np.abs(v[:, None] - v[None, :])
    return float(diff[np.triu_indices(v.size, 1)].min())


def _pairwise_rel_gap(v):
    scale = float(np.max(np.abs(v)))
    gap = _pairwise_gap(v)
    return gap if math.isinf(gap) else (gap / scale if scale > 0 else 0.0)


def analytic_lag_covariances(model, max_t0):
    """Diagonal ``Cov(s_t, s_{t-l})`` for C = 1; ``out[t0][l0]`` with one-based times."""
    dyn = model.dynamics
    if dyn.B.shape[1] != 1:
        raise ValidationError("analytic lag covariances need a single regime")
    B, psi, psi_bar = dyn.B[:, 0], dyn.psi[:, 0], dyn.psi_bar[:, 0]
    var = {1: psi_bar.copy()}
    for t in range(2, max_t0 + 1):
        var[t] = psi + B ** 2 * var[t - 1]
    return {t0: {l0: B ** l0 * var[t0 - l0] for l0 in range(t0)} for t0 in range(1, max_t0 + 1)}


def mc_lag_covariances(model, max_t0, mc_samples, rng):
    _, s = sample_latent_batch(model.prior, model.dynamics, int(mc_samples), max_t0, rng)
    c = s - s.mean(axis=0)
    n = s.shape[0]
    return {t0: {l0: np.sum(c[:, t0 - 1] * c[:, t0 - 1 - l0], axis=0) / (n - 1) for l0 in range(t0)}
            for t0 in range(1, max_t0 + 1)}


def check_identifiability_conditions(model, max_t0=3, mc_samples=20000, rng=None,
                                     gap_threshold=DEFAULT_GAP_THRESHOLD):
    """Scan whitened lag covariances for nonzero, pairwise distinct diagonals.

    A diagonal counts as distinct when its smallest pairwise gap relative to
    its largest magnitude, and its smallest magnitude, both reach
    ``gap_threshold``.

    Times are one-based; every ``(t0, l0)`` with ``2 <= t0 <= max_t0`` and
    ``0 <= l0 < t0`` is scanned. Analytic for one regime, Monte Carlo otherwise.
    """
    if max_t0 < 2:
        raise ValidationError("max_t0 must be >= 2")
    C = model.dims.C
    if C == 1:
        cov = analytic_lag_covariances(model, max_t0)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        cov = mc_lag_covariances(model, max_t0, mc_samples, rng)
    s11 = cov[1][0]
    if np.any(s11 <= 0) or not np.all(np.isfinite(s11)):
        raise NumericalError("initial source covariance is singular")
    entries, flags = [], []
    for t0 in range(2, max_t0 + 1):
        for l0 in range(t0):
            diag = cov[t0][l0] / s11  # diagonal whitening
            rel = _pairwise_rel_gap(diag)
            mad = float(np.min(np.abs(diag)))
            ok = rel >= gap_threshold and mad >= gap_threshold
            entries.append({"t0": t0, "l0": l0, "diag": diag.tolist(), "min_gap": _pairwise_gap(diag),
                            "rel_gap": rel, "min_abs_diag": mad, "distinct": bool(ok)})
            if not ok:
                flags.append(f"not_distinct(t0={t0},l0={l0})")
    best = max(entries, key=lambda e: (e["distinct"], min(e["rel_gap"], e["min_abs_diag"])))
    B_distinct = None
    if C == 1:
        B = model.dynamics.B[:, 0]
        B_distinct = bool(_pairwise_rel_gap(B) >= gap_threshold and np.min(np.abs(B)) >= gap_threshold)
        if not B_distinct:
            flags.append("B_not_distinct")
    return IdentifiabilityReport(entries, min(e["min_gap"] for e in entries),
                                 min(e["min_abs_diag"] for e in entries), (best["t0"], best["l0"]),
                                 any(e["distinct"] for e in entries), B_distinct, flags)


def recover_signed_permutation(A, tol=1e-8):
    """Recover ``F`` from ``A = F diag(lam) F^T`` when ``F`` is a signed permutation.

    Returns ``(F_hat, lam_hat)`` with eigenvalues in decreasing order; ``F_hat``
    has one +-1 per row and column.
    """
    A = np.asarray(A, dtype=np.float64)
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    if np.min(np.abs(np.diff(w)), initial=np.inf) < tol:
        raise NumericalError("eigenvalues are not distinct")
    F = np.zeros_like(V)
    rows = np.argmax(np.abs(V), axis=0)
    F[rows, np.arange(V.shape[1])] = np.sign(V[rows, np.arange(V.shape[1])])
    return F, w


# medoid mixing

@dataclass
class MedoidResult:
    index: int
    aligned: list
    deviation: np.ndarray
    mean_similarity: np.ndarray


def medoid_mixing(mixings):
    """Medoid by mean pairwise aligned cosine, others aligned to it.

    ``deviation`` is the per-entry standard deviation of the aligned mixings
    around their mean, with the 1/(n-1) estimator.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in mixings]
    n = len(mats)
    if n < 2:
        raise ValidationError("medoid needs at least two mixings")
    sim = np.ones((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            sim[a, b] = sim[b, a] = align_mixing(mats[b], mats[a]).mean_cosine
    mean_sim = (sim.sum(axis=1) - 1.0) / (n - 1)
    idx = int(np.argmax(mean_sim))
    aligned = [m if j == idx else align_mixing(m, mats[idx]).apply(m) for j, m in enumerate(mats)]
    stack = np.stack(aligned)
    dev = np.sqrt(np.sum((stack - stack.mean(axis=0)) ** 2, axis=0) / (n - 1))
    return MedoidResult(idx, aligned, dev, mean_sim)


# trajectory metrics

def _pair(truth, pred):
    x = np.asarray(truth, dtype=np.float64)
    y = np.asarray(pred, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mae_log1p(truth, pred):
    x, y = _pair(truth, pred)
    if np.any(y < 0):
        raise ValidationError("predictions must be nonnegative")
    return float(np.mean(np.abs(np.log1p(x) - np.log1p(y))))


def poisson_deviance(truth, pred):
    """Average Poisson deviance; cells with zero observed count contribute 0."""
    x, y = _pair(truth, pred)
    pos = x > 0
    if np.any(y[pos] <= 0):
        raise ValidationError("prediction is zero where the observed count is positive")
    cell = np.zeros_like(x)
    cell[pos] = x[pos] * np.log(x[pos] / y[pos]) - x[pos] + y[pos]
    return float(2.0 * cell.sum() / x.size)


def clr(x, pseudo_count=0.5):
    lx = np.log(np.asarray(x, dtype=np.float64) + pseudo_count)
    return lx - lx.mean(axis=-1, keepdims=True)


def aitchison_distance(truth, pred, pseudo_count=0.5):
    x, y = _pair(truth, pred)
    return float(np.mean(np.linalg.norm(clr(x, pseudo_count) - clr(y, pseudo_count), axis=-1)))


METRICS = {"mae_log1p": mae_log1p, "poisson_deviance": poisson_deviance, "aitchison": aitchison_distance}


def all_metrics(truth, pred):
    return {name: fn(truth, pred) for name, fn in METRICS.items()}
