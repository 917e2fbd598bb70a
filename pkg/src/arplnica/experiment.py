"""Experiment orchestration: restarts, recovery reports, timing sweeps and
leave-one-out forecasting."""
from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .errors import NumericalError, ValidationError
from .evaluation import align_mixing, all_metrics, medoid_mixing, recovery_report
from .forecasting import align_regimes, empirical_switch, forecast_sequence
from .generative import sample_dataset
from .io import load_model, read_dataset_csv, save_model, write_json
from .learning.vem import FitConfig, fit_vem, save_fit_state
from .scenarios import ScenarioSpec, generate_scenario


def git_style_hash(payload):
    data = payload if isinstance(payload, bytes) else payload.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def restart_seeds(seed, R):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(R)]


@dataclass
class ExperimentManifest:
    out: str
    name: str = "experiment"
    scenario: dict | None = None
    data: str | None = None
    oracle: str | None = None
    fit: dict = field(default_factory=dict)
    d: int | None = None
    C: int = 1
    restarts: int = 1
    seed: int = 0
    projections: int = 512
    workers: int = 1
    timing: dict | None = None
    base_dir: str = "."

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown manifest fields: {sorted(unknown)}")
        if "out" not in doc:
            raise ValidationError("manifest needs an 'out' directory")
        doc.setdefault("base_dir", os.path.dirname(os.path.abspath(path)))
        return cls(**doc)

    def resolve(self, p):
        return p if p is None or os.path.isabs(p) else os.path.join(self.base_dir, p)

    def validate(self):
        if (self.scenario is None) == (self.data is None):
            raise ValidationError("manifest needs exactly one of 'scenario' or 'data'")
        if self.data is not None and self.oracle is None:
            raise ValidationError("a 'data' manifest needs an 'oracle' model for recovery reporting")
        if int(self.restarts) < 1:
            raise ValidationError("restarts must be >= 1")
        FitConfig.from_dict(self.fit)

    def content_hash(self):
        doc = asdict(self)
        doc.pop("base_dir")
        doc.pop("out")
        parts = [json.dumps(doc, sort_keys=True)]
        for p in (self.data, self.oracle):
            if p is not None:
                with open(self.resolve(p), "rb") as fh:
                    parts.append(hashlib.sha1(fh.read()).hexdigest())
        return git_style_hash("\n".join(parts))


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ValidationError, NumericalError) as exc:
        raise type(exc)(f"stage '{name}' failed: {exc}") from exc


def _fit_one(args):
    data, d, C, cfg_doc, seed = args
    cfg = FitConfig.from_dict({**cfg_doc, "seed": seed})
    t = time.perf_counter()
    state = fit_vem(data, d, C, cfg)
    return state, time.perf_counter() - t


def fit_restarts(data, d, C, fit_doc, seeds, workers=1):
    jobs = [(data, d, C, fit_doc, s) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_fit_one, jobs))
    return [_fit_one(j) for j in jobs]


def timing_sweep(oracle, ns, Ts, epochs, d, C, seed=0):
    """Wall-clock seconds per epoch over a grid of dataset sizes and lengths."""
    rows = []
    for n in ns:
        for T in Ts:
            data, _ = sample_dataset(oracle, int(n), seed=seed, T=int(T))
            cfg = FitConfig(epochs=int(epochs), seed=seed, convergence_rel_tol=0.0)
            t = time.perf_counter()
            fit_vem(data, d, C, cfg)
            rows.append({"n": int(n), "T": int(T), "epochs": int(epochs),
                         "seconds_per_epoch": (time.perf_counter() - t) / int(epochs)})
    return rows


def run_experiment(manifest):
    """simulate -> fit (R restarts) -> evaluate; returns the summary dict.

    Writes per-restart ``restart_<r>/report.json`` and ``model.json``,
    ``summary.json`` (deterministic, no wall-clock values) and ``timing.json``.
    """
    manifest.validate()
    out = manifest.out if os.path.isabs(manifest.out) else manifest.resolve(manifest.out)
    os.makedirs(out, exist_ok=True)
    chash = manifest.content_hash()

    if manifest.scenario is not None:
        spec = _stage("simulate", lambda: ScenarioSpec.named(**manifest.scenario))
        oracle, data, _ = _stage("simulate", generate_scenario, spec)
        save_model(oracle, os.path.join(out, "oracle_model.json"))
    else:
        oracle = _stage("simulate", load_model, manifest.resolve(manifest.oracle))
        data = _stage("simulate", read_dataset_csv, manifest.resolve(manifest.data))
    d = manifest.d if manifest.d is not None else oracle.dims.d
    seeds = restart_seeds(manifest.seed, int(manifest.restarts))
    fits = _stage("fit", fit_restarts, data, d, int(manifest.C), dict(manifest.fit), seeds, int(manifest.workers))

    sim_seed = restart_seeds(manifest.seed + 1, 1)[0]
    oracle_sample, _ = _stage("evaluate", sample_dataset, oracle, len(data), seed=sim_seed, T=data[0].T,
                              offsets=data)
    rows, timings = [], []
    for r, ((state, secs), seed) in enumerate(zip(fits, seeds)):
        fitted_sample, _ = _stage("evaluate", sample_dataset, state.model, len(data), seed=sim_seed, T=data[0].T,
                                  offsets=data)
        rep = _stage("evaluate", recovery_report, state.model, oracle, fitted_sample, oracle_sample,
                     int(manifest.projections), secs)
        rdir = os.path.join(out, f"restart_{r}")
        os.makedirs(rdir, exist_ok=True)
        save_model(state.model, os.path.join(rdir, "model.json"))
        row = {"restart": r, "seed": seed, "mean_cosine": rep.alignment.mean_cosine,
               "per_column_cosine": rep.alignment.per_column_cosine.tolist(),
               "sliced_wasserstein": rep.sliced_wasserstein, "final_elbo": float(state.elbo_trace[-1]),
               "epochs_run": state.epochs_run, "converged": state.converged}
        write_json({**rep.to_dict(), **row, "config_hash": chash, "version": __version__},
                   os.path.join(rdir, "report.json"))
        rows.append(row)
        timings.append({"restart": r, "seconds": secs, "seconds_per_epoch": secs / max(state.epochs_run, 1)})

    cos = [r["mean_cosine"] for r in rows]
    by_elbo = int(np.argmax([r["final_elbo"] for r in rows]))
    summary = {
        "name": manifest.name, "version": __version__, "seed": manifest.seed, "config_hash": chash,
        "restarts": rows,
        "aggregate": {
            "mean_cosine_mean": float(np.mean(cos)),
            "mean_cosine_best": float(np.max(cos)),
            "best_restart": int(np.argmax(cos)),
            "elbo_selected_restart": by_elbo,
            "elbo_selected_cosine": cos[by_elbo],
            "sliced_wasserstein_mean": float(np.mean([r["sliced_wasserstein"] for r in rows])),
        },
    }
    write_json(summary, os.path.join(out, "summary.json"))
    timing = {"restarts": timings}
    if manifest.timing:
        tm = manifest.timing
        timing["sweep"] = _stage("timing", timing_sweep, oracle, tm.get("n", [len(data)]), tm.get("T", [data[0].T]),
                                 tm.get("epochs", 5), d, int(manifest.C), manifest.seed)
    write_json(timing, os.path.join(out, "timing.json"))
    return summary


def loo_forecast_pipeline(dataset, d, C, config, t0, horizon, hard_regimes=False, out=None, leave_out=None):
    """Leave-one-out fit, forecast of the held-out prefix and metrics.

    The empirical switch of each fold averages the training sequences' regime
    proxies. Returns a dict with per-fold metrics, the medoid mixing and the
    fold regime alignment to the first fold.
    """
    if horizon < 1 or t0 < 1 or t0 + horizon > dataset[0].T:
        raise ValidationError("need 1 <= t0 and t0 + horizon <= T")
    ids = dataset.ids if leave_out is None else list(leave_out)
    folds, gammas, alphas = [], [], []
    for sid in ids:
        train = dataset.without(sid)
        test = dataset[dataset.ids.index(sid)]
        state = _stage("fit", fit_vem, train, d, C, config)
        emp = _stage("forecast", empirical_switch, state.switch_proxies)
        fc = _stage("forecast", forecast_sequence, state.model, test, t0, horizon, emp, hard_regimes, config)
        truth = test.counts[t0:t0 + horizon]
        metrics = _stage("metrics", all_metrics, truth, fc.count_mean)
        folds.append({"held_out": sid, "metrics": metrics, "final_elbo": float(state.elbo_trace[-1]),
                      "prediction": fc.count_mean.tolist(), "truth": truth.tolist()})
        gammas.append(state.model.emission.Gamma)
        alphas.append(emp.alpha_bar)
        if out is not None:
            os.makedirs(out, exist_ok=True)
            save_fit_state(state, os.path.join(out, f"fold_{sid}_fit_state.json"))
            write_json(fc.to_dict(), os.path.join(out, f"fold_{sid}_forecast.json"))
    result = {"folds": folds,
              "mean_metrics": {k: float(np.mean([f["metrics"][k] for f in folds])) for k in folds[0]["metrics"]}}
    if len(gammas) >= 2:
        med = medoid_mixing(gammas)
        result["medoid_index"] = med.index
        result["medoid_gamma"] = gammas[med.index].tolist()
        result["gamma_deviation"] = med.deviation.tolist()
        # fold regimes relabeled onto the first fold, sources first matched to it
        perms = []
        for g, a in zip(gammas, alphas):
            al = align_mixing(g, gammas[0])
            perms.append(align_regimes(alphas[0], a[:, al.permutation, :]).tolist())
        result["regime_alignment"] = perms
    if out is not None:
        write_json(result, os.path.join(out, "loo_summary.json"))
    return result
