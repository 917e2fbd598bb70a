"""Long-format CSV datasets and JSON documents."""
from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

from .errors import ValidationError
from .generative import Dataset, ModelParams, Sequence


def _num(text, row, col):
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"row {row}: column '{col}' is not numeric ({text!r})") from None
    if not math.isfinite(v):
        raise ValidationError(f"row {row}: column '{col}' is not finite")
    return v


def read_dataset_csv(path):
    """Parse ``sequence,t,<features...>[,offset]`` rows into a Dataset.

    Row numbers in error messages are file line numbers (header is row 1).
    Missing offsets default to the log of the per-row total count.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "sequence" or header[1] != "t":
            raise ValidationError(f"{path}: header must start with 'sequence,t' followed by feature columns")
        has_offset = header[-1] == "offset"
        features = header[2:-1] if has_offset else header[2:]
        if not features:
            raise ValidationError(f"{path}: no feature columns")
        if len(set(features)) != len(features):
            raise ValidationError(f"{path}: duplicate feature names")
        K = len(features)
        rows = {}
        order = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ValidationError(f"row {lineno}: expected {len(header)} fields, got {len(rec)}")
            sid = rec[0].strip()
            tv = _num(rec[1], lineno, "t")
            if tv != int(tv):
                raise ValidationError(f"row {lineno}: time index must be an integer")
            counts = np.empty(K)
            for k in range(K):
                v = _num(rec[2 + k], lineno, features[k])
                if v < 0:
                    raise ValidationError(f"row {lineno}: negative count in '{features[k]}'")
                if v != int(v):
                    raise ValidationError(f"row {lineno}: non-integer count in '{features[k]}'")
                counts[k] = v
            if has_offset:
                off = _num(rec[-1], lineno, "offset")
            else:
                total = counts.sum()
                if total <= 0:
                    raise ValidationError(f"row {lineno}: zero total count, logsum offset undefined "
                                          "(add an 'offset' column)")
                off = math.log(total)
            if sid not in rows:
                rows[sid] = []
                order.append(sid)
            rows[sid].append((int(tv), counts, off, lineno))
    seqs = []
    for sid in order:
        recs = sorted(rows[sid], key=lambda r: r[0])
        times = [r[0] for r in recs]
        expected = list(range(times[0], times[0] + len(times)))
        if times != expected:
            bad = next(r for r, e in zip(recs, expected) if r[0] != e)
            raise ValidationError(f"row {bad[3]}: sequence '{sid}' has a ragged time grid "
                                  f"(missing or duplicate t near {bad[0]})")
        counts = np.stack([r[1] for r in recs]).astype(np.int64)
        seqs.append(Sequence(counts, np.array([r[2] for r in recs]), sid))
    if not seqs:
        raise ValidationError(f"{path}: no data rows")
    return Dataset(seqs, list(features))


def write_dataset_csv(dataset, path, include_offsets=True):
    """Write a Dataset; floats use ``repr`` so a read-back is bit-identical."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "t"] + list(dataset.features) + (["offset"] if include_offsets else []))
        for seq in dataset:
            for t in range(seq.T):
                row = [seq.id, t] + [int(c) for c in seq.counts[t]]
                if include_offsets:
                    row.append(repr(float(seq.offsets[t])))
                w.writerow(row)


def write_json(doc, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def save_model(model, path):
    write_json(model.to_dict(), path)


def load_model(path):
    return ModelParams.from_dict(read_json(path))


def read_matrix_csv(path):
    """Read a prediction/truth table: either ``t,<features>`` wide rows or a
    ``t,feature,predicted_mean`` long table. Returns (array T x K, features)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if header[:3] == ["t", "feature", "predicted_mean"]:
        feats, times = [], []
        vals = {}
        for n, r in enumerate(body, start=2):
            t = int(_num(r[0], n, "t"))
            f = r[1]
            if f not in feats:
                feats.append(f)
            if t not in times:
                times.append(t)
            vals[(t, f)] = _num(r[2], n, "predicted_mean")
        out = np.empty((len(times), len(feats)))
        for a, t in enumerate(sorted(times)):
            for b, f in enumerate(feats):
                if (t, f) not in vals:
                    raise ValidationError(f"{path}: missing entry for t={t}, feature={f}")
                out[a, b] = vals[(t, f)]
        return out, feats
    start = 1 if header and header[0] in ("t", "sequence") else 0
    if header[:2] == ["sequence", "t"]:
        start = 2
    feats = header[start:]
    if feats and feats[-1] == "offset":
        feats = feats[:-1]
    out = np.array([[_num(c, n, h) for c, h in zip(r[start:start + len(feats)], feats)]
                    for n, r in enumerate(body, start=2)])
    return out.reshape(len(body), len(feats)), feats


def write_long_predictions(path, pred, features, t_start=0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "feature", "predicted_mean"])
        for h in range(pred.shape[0]):
            for k, f in enumerate(features):
                w.writerow([t_start + h, f, repr(float(pred[h, k]))])


def write_wide_matrix(path, mat, features, t_start=0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + list(features))
        for h in range(mat.shape[0]):
            w.writerow([t_start + h] + [repr(float(v)) for v in mat[h]])
