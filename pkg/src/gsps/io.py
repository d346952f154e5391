"""File formats: dataset CSV, fitted-model JSON, dense matrix dumps."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .model import CorrelationModel, Dataset, Family, SeparableModel


def write_dataset_csv(dataset: Dataset, path) -> None:
    """One row per (realization, location): ``rep,x1..xd,y1..yp``."""
    header = (["rep"] + [f"x{k + 1}" for k in range(dataset.d)]
              + [f"y{j + 1}" for j in range(dataset.p)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in range(dataset.num_realizations):
            for i in range(dataset.n):
                writer.writerow([r] + [repr(float(v)) for v in dataset.locations[i]]
                                + [repr(float(v)) for v in dataset.realizations[r, i]])


def _parse_header(header, required_prefixes):
    cols = {}
    for prefix in required_prefixes:
        names = [h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()]
        expected = [f"{prefix}{k + 1}" for k in range(len(names))]
        if not names or names != expected:
            raise ValidationError(f"header must contain {prefix}1..{prefix}k in order, got {header}")
        cols[prefix] = [header.index(h) for h in names]
    return cols


def read_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[0] != "rep":
        raise ValidationError(f"{path}: first column must be 'rep'")
    cols = _parse_header(header, ["x", "y"])
    if len(header) != 1 + len(cols["x"]) + len(cols["y"]):
        raise ValidationError(f"{path}: unexpected columns in header {header}")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != len(header):
        raise ValidationError(f"{path}: ragged or empty data rows")
    reps = data[:, 0]
    labels = list(dict.fromkeys(reps.tolist()))
    blocks = [data[reps == lab] for lab in labels]
    n = blocks[0].shape[0]
    if any(b.shape[0] != n for b in blocks):
        raise ValidationError(f"{path}: realizations have different numbers of locations")
    locations = blocks[0][:, cols["x"]]
    for b in blocks[1:]:
        if not np.array_equal(b[:, cols["x"]], locations):
            raise ValidationError(f"{path}: locations differ between realizations")
    y = np.stack([b[:, cols["y"]] for b in blocks])
    return Dataset(locations, y)


def read_locations_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    cols = _parse_header(header, ["x"])
    try:
        data = np.array([[float(row[c]) for c in cols["x"]] for row in rows[1:] if row])
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"{path}: bad query row ({exc})") from None
    if data.size == 0:
        raise ValidationError(f"{path}: no query points")
    return data


def write_predictions_csv(path, x0, yhat, cov=None) -> None:
    d, p = x0.shape[1], yhat.shape[1]
    header = [f"x{k + 1}" for k in range(d)] + [f"yhat{j + 1}" for j in range(p)]
    if cov is not None:
        header += [f"cov{a + 1}_{b + 1}" for a in range(p) for b in range(a, p)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for m in range(len(x0)):
            row = [repr(float(v)) for v in x0[m]] + [repr(float(v)) for v in yhat[m]]
            if cov is not None:
                row += [repr(float(cov[m, a, b])) for a in range(p) for b in range(a, p)]
            writer.writerow(row)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def model_from_json(obj: dict) -> SeparableModel:
    """Rebuild a SeparableModel from ``fit`` output (gsps or mle)."""
    try:
        family = Family(obj["family"])
        corr = CorrelationModel(family, obj["theta"], obj["theta_bounds"])
        return SeparableModel(corr, np.asarray(obj["gamma"], dtype=float))
    except KeyError as exc:
        raise ValidationError(f"model JSON lacks field {exc}") from None


def write_matrix(path, a: np.ndarray) -> None:
    np.savetxt(path, np.asarray(a), fmt="%.17g")
