"""Schema-checked writers for experiment outputs (results.json and CSV tables)."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import jsonschema

_NUM_OR_NULL = {"type": ["number", "null"]}

RESULTS_SCHEMA = {
    "type": "object",
    "required": ["experiment", "config", "config_hash", "timestamp", "metrics", "meta_curve"],
    "properties": {
        "experiment": {"type": "string"},
        "config": {"type": "object"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "timestamp": {"type": "string"},
        "metrics": {"type": "object",
                    "additionalProperties": {"type": ["number", "string", "boolean", "null",
                                                      "array", "object"]}},
        "meta_curve": {
            "type": "array",
            "items": {"type": "object",
                      "required": ["meta_iter", "elementary_final_loss", "hypergrad_norm"],
                      "properties": {"meta_iter": {"type": "integer", "minimum": 0},
                                     "elementary_final_loss": {"type": "number"},
                                     "hypergrad_norm": {"type": "number", "minimum": 0}}},
        },
        "schedules": {
            "type": "object",
            "required": ["alpha", "gamma", "gamma_ratio"],
            "properties": {"alpha": {"type": "array", "items": {"type": "array"}},
                           "gamma": {"type": "array", "items": {"type": "array"}},
                           "gamma_ratio": {"type": "array", "items": {"type": "array"}}},
        },
        "hyper": {"type": "object",
                  "additionalProperties": {"type": "array", "items": {"type": "number"}}},
        "stopped_early": {"type": "boolean"},
        "stop_reason": {"type": "string"},
    },
}

# column name -> python type; float columns accept nan (written as "nan")
CSV_SCHEMAS = {
    "schedules": [("t", int), ("group", int), ("group_name", str), ("alpha", float),
                  ("gamma", float), ("gamma_ratio", str)],
    "meta_curve": [("meta_iter", int), ("elementary_final_loss", float),
                   ("hypergrad_norm", float)],
    "penalty_grid": [("class", int), ("row", int), ("col", int), ("log_penalty", float)],
    "learned_data": [("class", int), ("row", int), ("col", int), ("value", float)],
    "tied_matrix": [("layer", int), ("task_a", int), ("task_b", int), ("penalty", float),
                    ("normalized", float)],
    "chaos": [("log10_alpha", float), ("alpha", float), ("final_loss", float),
              ("dloss_dalpha", float), ("dloss_dlog10_alpha", float), ("status", str)],
    "memory": [("gamma", str), ("steps", int), ("elements", int), ("bits_per_step", float),
               ("theory_bits_per_step", float), ("naive_ratio", float), ("reversed_exactly", str)],
}


class SchemaError(ValueError):
    pass


def validate_results(doc: dict):
    try:
        jsonschema.validate(doc, RESULTS_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"results.json {where}: {exc.message}") from None


def _json_safe(x):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def dumps_results(doc: dict) -> str:
    doc = _json_safe(doc)
    validate_results(doc)
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_results(path, doc: dict):
    Path(path).write_text(dumps_results(doc))


def _check_row(name, row, k):
    cols = CSV_SCHEMAS[name]
    if len(row) != len(cols):
        raise SchemaError(f"{name}.csv row {k}: expected {len(cols)} columns, got {len(row)}")
    out = []
    for (col, tp), value in zip(cols, row):
        if tp is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif tp is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        else:
            ok = isinstance(value, str)
        if not ok:
            raise SchemaError(f"{name}.csv row {k} column {col}: expected {tp.__name__}, "
                              f"got {value!r}")
        out.append(repr(value) if tp is float else value)
    return out


def dumps_csv(name: str, rows) -> str:
    if name not in CSV_SCHEMAS:
        raise SchemaError(f"no schema for table {name!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([c for c, _ in CSV_SCHEMAS[name]])
    for k, row in enumerate(rows):
        writer.writerow(_check_row(name, tuple(row), k))
    return buf.getvalue()


def write_csv(path, name: str, rows):
    Path(path).write_text(dumps_csv(name, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
