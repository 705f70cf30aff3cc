"""File formats: CSV time series and versioned JSON documents.

States are 1-based in every file and 0-based in the Python API; the
conversion happens here and nowhere else.
"""
from __future__ import annotations

import csv
import json
import math
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from .errors import ConfigError
from .model import Dataset, EmissionSmooth, ModelSpec, SmoothSpec, StreamSpec, TransitionSmooth

MISSING = ("", "NA", "NaN", "nan")
_SMOOTH_KEYS = ("n_basis", "degree", "cyclic", "penalty", "penalty_order", "domain", "lambda0")


class InputError(ConfigError):
    """Malformed input file; exits the CLI with status 2."""


# ------------------------------------------------------------------ CSV


def format_value(v) -> str:
    """CSV text for a value: ``repr`` of floats (round-trips exactly), ``NA`` for missing."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else "NA"
    return str(v)


def write_csv(path, columns: dict) -> Path:
    """Write equal-length columns with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    arrays = [np.asarray(columns[k]) for k in names]
    n = {a.shape[0] for a in arrays}
    if len(n) > 1:
        raise ValueError(f"columns have different lengths {sorted(n)}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*arrays):
            w.writerow([format_value(v.item() if hasattr(v, "item") else v) for v in row])
    return path


def read_csv(path) -> Dataset:
    """Numeric CSV with a header; ``NA`` or empty cells are missing.

    A ``true_state`` column (1-based) becomes ``Dataset.states``. A ``time``
    column, if present, must be strictly increasing.
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise InputError(f"{path}: empty file, a header row is required")
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise InputError(f"{path}: duplicate column names in header")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for col_no, cell in enumerate(row, start=1):
                cell = cell.strip()
                if cell in MISSING:
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise InputError(f"{path}:{line_no}:{col_no}: non-numeric value {cell!r} "
                                     f"in column {header[col_no - 1]!r}") from None
            rows.append(vals)
    if not rows:
        raise InputError(f"{path}: no data rows")
    data = np.array(rows, dtype=float)
    columns = {h: data[:, k] for k, h in enumerate(header)}
    if "time" in columns:
        t = columns["time"]
        if not np.all(np.isfinite(t)) or np.any(np.diff(t) <= 0):
            raise InputError(f"{path}: column 'time' must be finite and strictly increasing")
    states = None
    if "true_state" in columns:
        s = columns.pop("true_state")
        if np.all(np.isfinite(s)) and np.all(s >= 1) and np.all(s == np.round(s)):
            states = s.astype(np.int64) - 1
    return Dataset(columns, states=states)


# ------------------------------------------------------------------ JSON


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("smoothhmm").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _json_path(error) -> str:
    out = "$"
    for part in error.absolute_path:
        out += f"[{part}]" if isinstance(part, int) else f".{part}"
    return out


def validate(doc, schema: str, source: str = "<document>") -> None:
    """Raise :class:`InputError` naming the JSON path of the first schema violation."""
    validator = Draft202012Validator(load_schema(schema))
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), e.message))
    if errors:
        e = errors[0]
        raise InputError(f"{source}: {_json_path(e)}: {e.message}")


def read_json(path, schema: str | None = None) -> dict:
    """Parse (reporting line and column on syntax errors) and optionally validate."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if schema is not None:
        validate(doc, schema, str(path))
    return doc


def to_jsonable(obj):
    """Plain JSON types; non-finite floats become ``null``."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(doc), indent=2) + "\n")
    return path


# ------------------------------------------------------------------ specs


def _states(value, N: int, what: str) -> list[int]:
    if value == "all":
        return list(range(N))
    if not 1 <= value <= N:
        raise InputError(f"{what} {value} out of range 1..{N}")
    return [value - 1]


def _smooth(d: dict) -> SmoothSpec:
    kw = {k: d[k] for k in _SMOOTH_KEYS if k in d}
    if "domain" in kw:
        kw["domain"] = tuple(float(v) for v in kw["domain"])
    return SmoothSpec(d["covariate"], **kw)


def spec_from_dict(doc: dict, source: str = "<model>") -> tuple[ModelSpec, dict]:
    """Build a :class:`ModelSpec` from a validated model document.

    Returns ``(spec, qreml_overrides)``.
    """
    validate(doc, "model", source)
    N = doc["n_states"]
    streams = []
    for k, st in enumerate(doc["streams"]):
        smooths = []
        for sm in st.get("smooths", []):
            for i in _states(sm["state"], N, f"streams[{k}] smooth state"):
                smooths.append(EmissionSmooth(sm["parameter"], i, _smooth(sm)))
        kw = {key: st[key] for key in ("n_basis", "degree", "penalty", "penalty_order", "lambda0", "init")
              if key in st}
        if "domain" in st:
            kw["domain"] = tuple(float(v) for v in st["domain"])
        streams.append(StreamSpec(st["column"], st["family"], smooths, **kw))
    tpm_smooths = []
    for sm in doc.get("tpm_smooths", []):
        pairs = [(i, j) for i in _states(sm["from"], N, "tpm smooth 'from' state")
                 for j in _states(sm["to"], N, "tpm smooth 'to' state")]
        if sm["from"] != "all" and sm["to"] != "all" and sm["from"] == sm["to"]:
            raise InputError(f"{source}: tpm smooth targets need from != to")
        tpm_smooths.extend(TransitionSmooth(i, j, _smooth(sm)) for i, j in pairs if i != j)
    tpm_init = doc.get("tpm_init")
    try:
        spec = ModelSpec(N, streams, tpm_smooths, initial=doc.get("initial", "stationary"),
                         self_transition=doc.get("self_transition", 0.9),
                         tpm_init=None if tpm_init is None else np.asarray(tpm_init, dtype=float))
    except ConfigError as exc:
        raise InputError(f"{source}: {exc}") from None
    return spec, dict(doc.get("qreml", {}))


def _smooth_dict(sm: SmoothSpec) -> dict:
    d = {"covariate": sm.covariate}
    for k in _SMOOTH_KEYS:
        v = getattr(sm, k)
        if v is not None:
            d[k] = list(v) if k == "domain" else v
    return d


def spec_to_dict(spec: ModelSpec, qreml: dict | None = None) -> dict:
    """Inverse of :func:`spec_from_dict` (smooths are listed per state, never as ``"all"``)."""
    streams = []
    for st in spec.streams:
        d = {"column": st.column, "family": st.family}
        if st.smooths:
            d["smooths"] = [{"parameter": es.parameter, "state": es.state + 1, **_smooth_dict(es.smooth)}
                            for es in st.smooths]
        if st.family == "spline":
            d.update(n_basis=st.n_basis, degree=st.degree, penalty=st.penalty,
                     penalty_order=st.penalty_order)
            if st.domain is not None:
                d["domain"] = list(st.domain)
            if st.lambda0 is not None:
                d["lambda0"] = st.lambda0
        if st.init:
            d["init"] = {k: [float(x) for x in v] for k, v in st.init.items()}
        streams.append(d)
    doc = {"schema_version": 1, "n_states": spec.n_states, "streams": streams,
           "tpm_smooths": [{"from": ts.i + 1, "to": ts.j + 1, **_smooth_dict(ts.smooth)}
                           for ts in spec.tpm_smooths],
           "initial": spec.initial, "self_transition": spec.self_transition}
    if spec.tpm_init is not None:
        doc["tpm_init"] = np.asarray(spec.tpm_init).tolist()
    if qreml:
        doc["qreml"] = qreml
    return to_jsonable(doc)


def resolved_spec(model) -> ModelSpec:
    """The model's spec with every data-dependent domain made explicit."""
    from dataclasses import replace

    spec = model.spec
    doms = {b.name: b.term.config.domain for b in model.blocks}

    def fix(sm, target):
        return replace(sm, domain=tuple(doms[f"s({sm.covariate}):{target}"]))

    streams = []
    for st, comp in zip(spec.streams, model.streams):
        if st.family == "spline":
            streams.append(replace(st, domain=tuple(comp.basis.domain)))
            continue
        smooths = [replace(es, smooth=fix(es.smooth, f"{st.column}.{es.parameter}[{es.state + 1}]"))
                   for es in st.smooths]
        streams.append(replace(st, smooths=smooths))
    tpm = [replace(ts, smooth=fix(ts.smooth, f"tpm[{ts.i + 1},{ts.j + 1}]")) for ts in spec.tpm_smooths]
    return replace(spec, streams=streams, tpm_smooths=tpm)
