"""ARPLN-ICA generative model: parameter containers, samplers and the exact
joint log-density.

Array layout conventions (row-major, axis order component, regime[, regime]):

* ``pi[i, k]``      initial probability of regime ``k`` for component ``i``
* ``A[i, k, l]``    P(u_{t+1} = k | u_t = l) for component ``i``; columns
                    (fixed ``l``) sum to one over ``k``
* ``b_bar, psi_bar, B, b, psi`` have shape ``(d, C)``
* ``Gamma`` has shape ``(K, d)``, ``eta`` shape ``(K,)``

Time is zero-based everywhere in the code.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .errors import NumericalError, ValidationError

DEFAULT_LOG_RATE_CAP = 30.0
_STOCH_TOL = 1e-12
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Dims:
    K: int
    d: int
    C: int
    T: int = 1

    def __post_init__(self):
        if not (self.K >= self.d >= 1):
            raise ValidationError(f"need K >= d >= 1, got K={self.K}, d={self.d}")
        if self.C < 1:
            raise ValidationError(f"need C >= 1, got C={self.C}")
        if self.T < 1:
            raise ValidationError(f"need T >= 1, got T={self.T}")


def _as_f64(a, shape, name):
    arr = np.array(a, dtype=np.float64)
    if arr.shape != shape:
        raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RegimePrior:
    pi: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        A = np.asarray(self.A, dtype=np.float64)
        if pi.ndim != 2 or A.shape != pi.shape + (pi.shape[1],):
            raise ValidationError(f"pi {pi.shape} / A {A.shape} are inconsistent")
        object.__setattr__(self, "pi", _as_f64(pi, pi.shape, "pi"))
        object.__setattr__(self, "A", _as_f64(A, A.shape, "A"))
        if np.any(pi < 0) or np.any(A < 0):
            raise ValidationError("regime probabilities must be nonnegative")
        if np.max(np.abs(pi.sum(axis=1) - 1.0)) > _STOCH_TOL:
            raise ValidationError("rows of pi must sum to 1")
        if np.max(np.abs(A.sum(axis=1) - 1.0)) > _STOCH_TOL:
            raise ValidationError("columns of A (over the destination index) must sum to 1")

    @classmethod
    def uniform(cls, d, C):
        return cls(np.full((d, C), 1.0 / C), np.full((d, C, C), 1.0 / C))


@dataclass(frozen=True)
class SourceDynamics:
    b_bar: np.ndarray
    psi_bar: np.ndarray
    B: np.ndarray
    b: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.b_bar)
        if len(shape) != 2:
            raise ValidationError(f"b_bar must be (d, C), got {shape}")
        for name in ("b_bar", "psi_bar", "B", "b", "psi"):
            object.__setattr__(self, name, _as_f64(getattr(self, name), shape, name))
        if np.any(self.psi_bar <= 0) or np.any(self.psi <= 0):
            raise ValidationError("psi_bar and psi must be strictly positive")

    def scaled(self, factor):
        """Dynamics of ``factor * s`` when ``s`` follows these dynamics."""
        f = float(factor)
        return SourceDynamics(f * self.b_bar, f * f * self.psi_bar, self.B, f * self.b, f * f * self.psi)


@dataclass(frozen=True)
class Emission:
    Gamma: np.ndarray
    eta: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        G = np.asarray(self.Gamma, dtype=np.float64)
        if G.ndim != 2:
            raise ValidationError(f"Gamma must be 2-D, got shape {G.shape}")
        object.__setattr__(self, "Gamma", _as_f64(G, G.shape, "Gamma"))
        object.__setattr__(self, "eta", _as_f64(self.eta, (G.shape[0],), "eta"))
        if self.normalized:
            norms = np.linalg.norm(self.Gamma, axis=0)
            if np.max(np.abs(norms - 1.0)) > 1e-10:
                raise ValidationError("Gamma flagged normalized but columns are not unit norm")


@dataclass(frozen=True)
class ModelParams:
    dims: Dims
    prior: RegimePrior
    dynamics: SourceDynamics
    emission: Emission

    def __post_init__(self):
        K, d, C = self.dims.K, self.dims.d, self.dims.C
        if self.prior.pi.shape != (d, C):
            raise ValidationError(f"pi shape {self.prior.pi.shape} != {(d, C)}")
        if self.dynamics.B.shape != (d, C):
            raise ValidationError(f"dynamics shape {self.dynamics.B.shape} != {(d, C)}")
        if self.emission.Gamma.shape != (K, d):
            raise ValidationError(f"Gamma shape {self.emission.Gamma.shape} != {(K, d)}")

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return {
            "version": 1,
            "dims": {"K": self.dims.K, "d": self.dims.d, "C": self.dims.C, "T": self.dims.T},
            "gamma_normalized": bool(self.emission.normalized),
            "axis_order": {
                "pi": ["component", "regime"],
                "A": ["component", "regime_to", "regime_from"],
                "b_bar": ["component", "regime"],
                "Gamma": ["feature", "component"],
            },
            "pi": self.prior.pi.tolist(),
            "A": self.prior.A.tolist(),
            "b_bar": self.dynamics.b_bar.tolist(),
            "psi_bar": self.dynamics.psi_bar.tolist(),
            "B": self.dynamics.B.tolist(),
            "b": self.dynamics.b.tolist(),
            "psi": self.dynamics.psi.tolist(),
            "Gamma": self.emission.Gamma.tolist(),
            "eta": self.emission.eta.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != 1:
            raise ValidationError(f"unsupported model document version {doc.get('version')!r}")
        try:
            dims = Dims(**doc["dims"])
            return cls(
                dims=dims,
                prior=RegimePrior(doc["pi"], doc["A"]),
                dynamics=SourceDynamics(doc["b_bar"], doc["psi_bar"], doc["B"], doc["b"], doc["psi"]),
                emission=Emission(doc["Gamma"], doc["eta"], bool(doc.get("gamma_normalized", False))),
            )
        except KeyError as exc:
            raise ValidationError(f"model document is missing field {exc}") from None


@dataclass
class Sequence:
    """One count trajectory ``counts[t, k]`` with per-time offsets."""

    counts: np.ndarray
    offsets: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 2:
            raise ValidationError(f"counts must be (T, K), got {self.counts.shape}")
        if not np.issubdtype(self.counts.dtype, np.integer):
            as_int = np.rint(self.counts)
            if not np.array_equal(as_int, self.counts):
                raise ValidationError(f"sequence {self.id!r}: counts must be integers")
            self.counts = as_int.astype(np.int64)
        if np.any(self.counts < 0):
            raise ValidationError(f"sequence {self.id!r}: counts must be nonnegative")
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.offsets.shape != (self.counts.shape[0],):
            raise ValidationError(f"sequence {self.id!r}: offsets shape {self.offsets.shape} "
                                  f"does not match T={self.counts.shape[0]}")
        if not np.all(np.isfinite(self.offsets)):
            raise ValidationError(f"sequence {self.id!r}: offsets must be finite")

    @property
    def T(self):
        return self.counts.shape[0]

    @property
    def K(self):
        return self.counts.shape[1]

    def truncated(self, t0):
        return Sequence(self.counts[:t0], self.offsets[:t0], self.id)


@dataclass
class Dataset:
    sequences: list = field(default_factory=list)
    features: list = None

    def __post_init__(self):
        if self.features is None and self.sequences:
            self.features = [f"f{k}" for k in range(self.sequences[0].K)]
        if self.features is None:
            self.features = []
        for s in self.sequences:
            if s.K != len(self.features):
                raise ValidationError(f"sequence {s.id!r} has {s.K} features, expected {len(self.features)}")

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def ids(self):
        return [s.id for s in self.sequences]

    def counts_array(self):
        """Stack counts into ``(n, T, K)``; requires a common length."""
        if not self.sequences:
            return np.zeros((0, 0, len(self.features)), dtype=np.int64)
        return np.stack([s.counts for s in self.sequences])

    def without(self, seq_id):
        keep = [s for s in self.sequences if s.id != seq_id]
        if len(keep) == len(self.sequences):
            raise ValidationError(f"no sequence with id {seq_id!r}")
        return Dataset(keep, list(self.features))

    def subset(self, ids):
        wanted = set(ids)
        return Dataset([s for s in self.sequences if s.id in wanted], list(self.features))


@dataclass
class LatentPath:
    u: np.ndarray
    s: np.ndarray


def _check_component(d, component):
    if not (0 <= int(component) < d):
        raise ValidationError(f"component index {component} out of range for d={d}")


def sample_regime_chain(prior, component, T, rng):
    """Draw ``T`` regime labels for one component."""
    d, C = prior.pi.shape
    _check_component(d, component)
    if T < 1:
        raise ValidationError("T must be >= 1")
    labels = np.empty(T, dtype=np.int64)
    draws = rng.random(T)
    cdf0 = np.cumsum(prior.pi[component])
    labels[0] = min(np.searchsorted(cdf0, draws[0], side="right"), C - 1)
    cdfs = np.cumsum(prior.A[component], axis=0)  # column l is the CDF of next | prev=l
    for t in range(1, T):
        labels[t] = min(np.searchsorted(cdfs[:, labels[t - 1]], draws[t], side="right"), C - 1)
    return labels


def sample_source_path(dynamics, component, labels, rng):
    d, C = dynamics.B.shape
    _check_component(d, component)
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0 or labels.min() < 0 or labels.max() >= C:
        raise ValidationError("labels must be a nonempty sequence of integers in [0, C)")
    i = component
    if np.any(dynamics.psi_bar[i] <= 0) or np.any(dynamics.psi[i] <= 0):
        raise ValidationError("source variances must be strictly positive")
    z = rng.standard_normal(labels.size)
    s = np.empty(labels.size)
    k = labels[0]
    s[0] = dynamics.b_bar[i, k] + np.sqrt(dynamics.psi_bar[i, k]) * z[0]
    for t in range(1, labels.size):
        k = labels[t]
        s[t] = dynamics.B[i, k] * s[t - 1] + dynamics.b[i, k] + np.sqrt(dynamics.psi[i, k]) * z[t]
    return s


def sample_latent_batch(prior, dynamics, n, T, rng):
    """Vectorized draws of ``n`` latent paths; returns ``u, s`` of shape (n, T, d)."""
    d, C = prior.pi.shape
    comp = np.arange(d)
    u = np.empty((n, T, d), dtype=np.int64)
    s = np.empty((n, T, d))
    r = rng.random((n, T, d))
    z = rng.standard_normal((n, T, d))
    u[:, 0] = np.minimum((r[:, 0, :, None] >= np.cumsum(prior.pi, axis=-1)).sum(-1), C - 1)
    k = u[:, 0]
    s[:, 0] = dynamics.b_bar[comp, k] + np.sqrt(dynamics.psi_bar[comp, k]) * z[:, 0]
    cols = np.cumsum(prior.A, axis=1)  # (d, k, l)
    for t in range(1, T):
        cdf = cols[comp, :, u[:, t - 1]]  # (n, d, C)
        u[:, t] = np.minimum((r[:, t, :, None] >= cdf).sum(-1), C - 1)
        k = u[:, t]
        s[:, t] = (dynamics.B[comp, k] * s[:, t - 1] + dynamics.b[comp, k]
                   + np.sqrt(dynamics.psi[comp, k]) * z[:, t])
    return u, s


def log_intensity(emission, offsets, s):
    return s @ emission.Gamma.T + np.asarray(offsets, dtype=np.float64)[..., None] + emission.eta


def emit_counts(emission, offsets, s, rng, log_rate_cap=DEFAULT_LOG_RATE_CAP):
    """Poisson draws with rate ``exp(Gamma s_t + o_t + eta)``.

    Raises ``NumericalError`` when a log-rate exceeds ``log_rate_cap``.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if s.shape[1] != emission.Gamma.shape[1] or np.shape(offsets) != (s.shape[0],):
        raise ValidationError("shapes of s, offsets and Gamma are inconsistent")
    z = log_intensity(emission, offsets, s)
    if np.max(z) > log_rate_cap:
        t, k = np.unravel_index(np.argmax(z), z.shape)
        raise NumericalError(f"log-rate {z[t, k]:.3g} at (t={t}, k={k}) exceeds cap {log_rate_cap}")
    return rng.poisson(np.exp(z)).astype(np.int64)


def sequence_seeds(seed, n):
    """Independent child seeds, one per sequence index."""
    return np.random.SeedSequence(seed).spawn(n)


def sample_dataset(model, n, offsets="zero", seed=0, T=None, log_rate_cap=DEFAULT_LOG_RATE_CAP,
                   id_prefix="seq"):
    """Sample ``n`` trajectories with their latent paths.

    ``offsets`` is ``"zero"``, an array of shape ``(n, T)`` or ``(T,)``, or a
    donor ``Dataset`` whose offsets are replayed (cycling over donors).
    ``seed`` is an int or a ``numpy.random.Generator`` (from which a seed is
    drawn); sequence ``j`` always uses the ``j``-th child stream.
    """
    if n < 0:
        raise ValidationError("n must be >= 0")
    T = model.dims.T if T is None else int(T)
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    K, d = model.dims.K, model.dims.d
    if isinstance(offsets, str):
        if offsets != "zero":
            raise ValidationError(f"unknown offsets policy {offsets!r}")
        off = np.zeros((n, T))
    elif isinstance(offsets, Dataset):
        if len(offsets) == 0:
            raise ValidationError("offset donor dataset is empty")
        off = np.stack([offsets[j % len(offsets)].offsets[:T] for j in range(n)]) if n else np.zeros((0, T))
        if off.shape[1:] != (T,):
            raise ValidationError("donor offsets are shorter than T")
    else:
        off = np.broadcast_to(np.asarray(offsets, dtype=np.float64), (n, T))

    seqs, paths = [], []
    for j, ss in enumerate(sequence_seeds(seed, n)):
        rng = np.random.default_rng(ss)
        u = np.empty((T, d), dtype=np.int64)
        s = np.empty((T, d))
        for i in range(d):
            u[:, i] = sample_regime_chain(model.prior, i, T, rng)
            s[:, i] = sample_source_path(model.dynamics, i, u[:, i], rng)
        x = emit_counts(model.emission, off[j], s, rng, log_rate_cap)
        seqs.append(Sequence(x, np.array(off[j]), f"{id_prefix}{j}"))
        paths.append(LatentPath(u, s))
    return Dataset(seqs, [f"f{k}" for k in range(K)]), paths


def log_joint(model, seq, path):
    """Exact ``log p(x, s, u)`` for one sequence and one latent path."""
    u = np.asarray(path.u)
    s = np.asarray(path.s, dtype=np.float64)
    T, d = s.shape
    if u.shape != (T, d) or seq.counts.shape != (T, model.dims.K) or d != model.dims.d:
        raise ValidationError("sequence, path and model shapes are inconsistent")
    comp = np.arange(d)
    pr, dyn = model.prior, model.dynamics
    with np.errstate(divide="ignore"):
        lp = np.sum(np.log(pr.pi[comp, u[0]]))
        if T > 1:
            lp += np.sum(np.log(pr.A[comp, u[1:], u[:-1]]))
    # initial source density
    var0 = dyn.psi_bar[comp, u[0]]
    lp += np.sum(-0.5 * (_LOG_2PI + np.log(var0)) - 0.5 * (s[0] - dyn.b_bar[comp, u[0]]) ** 2 / var0)
    if T > 1:
        uk = u[1:]
        mean = dyn.B[comp, uk] * s[:-1] + dyn.b[comp, uk]
        var = dyn.psi[comp, uk]
        lp += np.sum(-0.5 * (_LOG_2PI + np.log(var)) - 0.5 * (s[1:] - mean) ** 2 / var)
    z = log_intensity(model.emission, seq.offsets, s)
    x = seq.counts
    lp += np.sum(x * z - np.exp(z) - gammaln(x + 1.0))
    return float(lp)
