"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import NumericalError, ValidationError
from .evaluation import all_metrics, gram_coherence, max_coherence, recovery_report
from .experiment import ExperimentManifest, fit_restarts, restart_seeds, run_experiment
from .forecasting import EXACT, PLUGIN, empirical_switch, forecast_sequence
from .generative import sample_dataset
from .io import (load_model, read_dataset_csv, read_json, read_matrix_csv, save_model, write_dataset_csv,
                 write_json, write_long_predictions, write_wide_matrix)
from .learning.vem import FitConfig, load_fit_state, save_fit_state
from .scenarios import TARGET_COHERENCE, ScenarioSpec, generate_scenario

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _write_latents(path, latents):
    write_json({"u": [p.u.tolist() for p in latents], "s": [p.s.tolist() for p in latents]}, path)


def cmd_simulate(args):
    os.makedirs(args.out, exist_ok=True)
    if args.scenario:
        spec = ScenarioSpec.named(args.scenario, n=args.n, seed=args.seed)
        model, data, latents = generate_scenario(spec)
        write_json(spec.to_dict(), os.path.join(args.out, "scenario.json"))
    else:
        model = load_model(args.model)
        data, latents = sample_dataset(model, args.n, seed=args.seed)
    save_model(model, os.path.join(args.out, "model.json"))
    write_dataset_csv(data, os.path.join(args.out, "data.csv"))
    _write_latents(os.path.join(args.out, "latents.json"), latents)
    print(json.dumps({"n": len(data), "out": args.out}))


def _load_fit_config(path):
    doc = dict(read_json(path)) if path else {}
    d = doc.pop("d", None)
    C = int(doc.pop("C", 1))
    restarts = int(doc.pop("restarts", 1))
    if d is None:
        raise ValidationError("fit config must provide 'd'")
    FitConfig.from_dict(doc)
    return int(d), C, restarts, doc


def cmd_fit(args):
    data = read_dataset_csv(args.data)
    if args.leave_out:
        if args.leave_out not in data.ids:
            raise ValidationError(f"unknown sequence id {args.leave_out!r}")
        data = data.without(args.leave_out)
    d, C, restarts, doc = _load_fit_config(args.config)
    seeds = restart_seeds(doc.get("seed", 0), restarts) if restarts > 1 else [doc.get("seed", 0)]
    fits = fit_restarts(data, d, C, doc, seeds)
    best = int(np.argmax([s.elbo_trace[-1] for s, _ in fits]))
    state = fits[best][0]
    os.makedirs(args.out, exist_ok=True)
    save_model(state.model, os.path.join(args.out, "model.json"))
    save_fit_state(state, os.path.join(args.out, "fit_state.json"))
    with open(os.path.join(args.out, "elbo_trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "elbo"])
        for e, v in enumerate(state.elbo_trace):
            w.writerow([e, repr(float(v))])
    summary = {"version": __version__, "selected_restart": best, "seeds": seeds,
               "final_elbo": [float(s.elbo_trace[-1]) for s, _ in fits], "epochs_run": state.epochs_run,
               "converged": state.converged, "left_out": args.leave_out, "flags": [list(f) for f in state.flags]}
    write_json(summary, os.path.join(args.out, "fit_summary.json"))
    print(json.dumps({"final_elbo": summary["final_elbo"][best], "out": args.out}))


def cmd_eval_recovery(args):
    path = os.path.join(args.fitted, "model.json") if os.path.isdir(args.fitted) else args.fitted
    fitted = load_model(path)
    oracle = load_model(args.oracle)
    T = oracle.dims.T
    a, _ = sample_dataset(fitted, args.n, seed=args.seed, T=T)
    b, _ = sample_dataset(oracle, args.n, seed=args.seed, T=T)
    rep = recovery_report(fitted, oracle, a, b, args.projections)
    doc = {**rep.to_dict(), "version": __version__, "seed": args.seed, "n": args.n}
    write_json(doc, args.out)
    print(json.dumps({"mean_cosine": rep.alignment.mean_cosine, "sliced_wasserstein": rep.sliced_wasserstein}))


def cmd_forecast(args):
    model = load_model(args.model)
    data = read_dataset_csv(args.data)
    emp = None
    cfg_doc = {}
    if args.fit_state:
        st = load_fit_state(args.fit_state)
        emp = empirical_switch(st.switch_proxies)
    if args.config:
        cfg_doc = dict(read_json(args.config))
        for k in ("d", "C", "restarts"):
            cfg_doc.pop(k, None)
    cfg = FitConfig.from_dict(cfg_doc)
    ids = [args.sequence] if args.sequence else data.ids
    os.makedirs(args.out, exist_ok=True)
    for sid in ids:
        if sid not in data.ids:
            raise ValidationError(f"unknown sequence id {sid!r}")
        seq = data[data.ids.index(sid)]
        if not 1 <= args.t0 <= seq.T:
            raise ValidationError(f"t0={args.t0} outside [1, {seq.T}] for sequence {sid!r}")
        fc = forecast_sequence(model, seq, args.t0, args.horizon, emp, args.hard_regimes, cfg,
                               method=args.method)
        write_long_predictions(os.path.join(args.out, f"forecast_{sid}.csv"), fc.count_mean, data.features,
                               t_start=args.t0)
        write_json({**fc.to_dict(), "sequence": sid, "t0": args.t0, "horizon": args.horizon,
                    "hard_regimes": args.hard_regimes, "method": args.method},
                   os.path.join(args.out, f"forecast_{sid}.json"))
        avail = seq.counts[args.t0:args.t0 + args.horizon]
        if avail.shape[0] == args.horizon:
            write_wide_matrix(os.path.join(args.out, f"truth_{sid}.csv"), avail, data.features, t_start=args.t0)
    print(json.dumps({"sequences": ids, "out": args.out}))


def cmd_metrics(args):
    truth, ft = read_matrix_csv(args.truth)
    pred, fp = read_matrix_csv(args.pred)
    if ft != fp:
        raise ValidationError("truth and prediction feature columns differ")
    vals = all_metrics(truth, pred)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in vals.items():
            w.writerow([k, repr(float(v))])
    print(json.dumps(vals))


def cmd_gram(args):
    model = load_model(args.model)
    G = model.emission.Gamma
    print(json.dumps({"gram_coherence": gram_coherence(G).tolist(), "max_coherence": max_coherence(G)}))


def cmd_run(args):
    summary = run_experiment(ExperimentManifest.load(args.manifest))
    print(json.dumps(summary["aggregate"]))


def build_parser():
    p = argparse.ArgumentParser(prog="arplnica", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="sample a dataset from a scenario or a model")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--scenario", choices=sorted(TARGET_COHERENCE))
    g.add_argument("--model")
    s.add_argument("--n", type=int, default=150)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="variational EM fit")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--leave-out")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval-recovery", help="compare a fitted model with an oracle")
    s.add_argument("--fitted", required=True)
    s.add_argument("--oracle", required=True)
    s.add_argument("--projections", type=int, default=512)
    s.add_argument("--n", type=int, default=150)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval_recovery)

    s = sub.add_parser("forecast", help="prefix filtering and moment forecast")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--t0", type=int, required=True)
    s.add_argument("--horizon", type=int, required=True)
    s.add_argument("--hard-regimes", action="store_true")
    s.add_argument("--fit-state", help="training fit state providing the empirical switch")
    s.add_argument("--config", help="fit config used for prefix filtering")
    s.add_argument("--sequence", help="forecast only this sequence id")
    s.add_argument("--method", choices=[EXACT, PLUGIN], default=EXACT)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("metrics", help="MAE log1p, Poisson deviance and Aitchison distance")
    s.add_argument("--truth", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("gram", help="absolute Gram matrix of a model's mixing")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_gram)

    s = sub.add_parser("run", help="run an experiment manifest")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
