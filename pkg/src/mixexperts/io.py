"""CSV and JSON plumbing shared by the command-line tools.

JSON floats are written with 17 significant digits so that every value
round-trips exactly; non-finite floats become ``null``. Every JSON document
carries ``schema_version``.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np

from .core import GATED_VARIANTS, Gating, MEModelSpec
from .errors import InputError
from .experts import family_from_json

SCHEMA_VERSION = 1


# --------------------------------------------------------------------- JSON


def _fmt_float(x):
    return format(x, ".17g") if math.isfinite(x) else "null"


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        parts = [_encode(v, indent, level + 1) for v in obj]
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(parts) + "]"
        return "[\n" + ",\n".join(pad + p for p in parts) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent=2):
    return _encode(obj, indent, 0) + "\n"


def write_json(path, obj):
    doc = {"schema_version": SCHEMA_VERSION, **obj}
    Path(path).write_text(dumps(doc), encoding="utf-8")


def read_json(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return doc


# ---------------------------------------------------------------------- CSV


def read_table(path):
    """Header plus float rows; any non-numeric cell is an input error naming its line."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file, header row required") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}: line {line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise InputError(f"{path}: line {line_no}: non-numeric value") from None
    if not rows:
        raise InputError(f"{path}: no data rows")
    return header, np.array(rows)


def write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.atleast_2d(rows):
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if v == round(v) and abs(v) < 2**53:
        return str(int(v))
    return format(v, ".17g")


def _columns(header, names, path):
    idx = []
    for n in names:
        if n not in header:
            raise InputError(f"{path}: column {n!r} not in header {header}")
        idx.append(header.index(n))
    return idx


def load_dataset(path, family, response, covariates=()):
    """Read a CSV into a :class:`Dataset` for ``family``.

    Ranking columns hold 1-based candidate numbers padded with 0; categorical
    series hold 0-based states.
    """
    header, table = read_table(path)
    y = table[:, _columns(header, response, path)]
    x = table[:, _columns(header, covariates, path)] if covariates else None
    if family.kind == "rankings":
        if np.any(y != np.round(y)) or np.any(y < 0):
            raise InputError(f"{path}: rankings must be non-negative integers")
        y = y.astype(np.int64) - 1
    elif family.kind == "binomial":
        y = y[:, 0]
    return family.dataset(y, x)


def dataset_table(data, covariate_names=None):
    """Header and rows for writing a dataset back to CSV."""
    y = np.asarray(data.outcomes)
    if data.kind == "continuous":
        ycols = [f"y{j + 1}" for j in range(y.shape[1])] if y.shape[1] > 1 else ["y"]
    elif data.kind == "binomial":
        y, ycols = y[:, None], ["y"]
    elif data.kind == "categorical":
        ycols = [f"t{j}" for j in range(y.shape[1])]
    else:
        y = y + 1
        ycols = [f"r{j + 1}" for j in range(y.shape[1])]
    x = np.asarray(data.covariates)
    names = covariate_names or [f"x{j + 1}" for j in range(x.shape[1])]
    return ycols + list(names), np.column_stack([y, x]) if x.shape[1] else y


# ----------------------------------------------------------- model <-> JSON


def model_to_json(model):
    out = {
        "variant": model.variant,
        "components": model.G,
        "family": model.family.describe(),
        "experts": [model.family.to_json(e) for e in model.experts],
    }
    if model.variant in GATED_VARIANTS:
        out["gating"] = model.gating.gamma.tolist()
    else:
        out["weights"] = np.asarray(model.weights).tolist()
    return out


def model_from_json(d):
    family = family_from_json(d["family"])
    experts = tuple(family.from_json(e) for e in d["experts"])
    if d["variant"] in GATED_VARIANTS:
        return MEModelSpec(d["variant"], family, experts, gating=Gating(np.asarray(d["gating"], float)))
    return MEModelSpec(d["variant"], family, experts, weights=np.asarray(d["weights"], float))

