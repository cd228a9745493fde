"""File formats: time-tag streams, result documents, flat config files.

Binary tag file layout (little endian)::

    16 bytes   magic  b"SPEPHOT-TAGS\\x00\\x00\\x00\\x00"
    u32        format version (1)
    u32        metadata length M
    u64        duration (ps)
    M bytes    UTF-8 JSON origin metadata, zero padded to a multiple of 16
    records    16 bytes each: u64 timestamp (ps), u8 channel, 7 pad bytes

The CSV twin has ``#``-prefixed ``duration_ps`` and ``origin`` lines, then a
``timestamp_ps,channel`` header.
"""

from __future__ import annotations

import bisect
import csv
import io as _io
import json
import re
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .correlator import EdgeCounter, G2Curve, TcspcHistogram, _pair_histogram, lag_grid, linear_curve
from .fitting import FitResult
from .photonsim import TimeTagStream

MAGIC = b"SPEPHOT-TAGS\x00\x00\x00\x00"
TAG_VERSION = 1
SCHEMA_VERSION = 1
RECORD = np.dtype([("t", "<u8"), ("ch", "u1"), ("pad", "V7")])
_PREAMBLE = np.dtype([("magic", "S16"), ("version", "<u4"), ("meta_len", "<u4"), ("duration", "<u8")])


class FormatError(ValueError):
    """Malformed or unsupported input file."""


# --------------------------------------------------------------------------
# time tags


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    if is_dataclass(o):
        return asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_tags(path, stream: TimeTagStream, fmt: str = "bin") -> None:
    path = Path(path)
    meta = json.dumps(stream.origin, sort_keys=True, default=_json_default).encode()
    if fmt == "bin":
        pad = (-len(meta)) % 16
        pre = np.zeros(1, _PREAMBLE)
        pre[0] = (MAGIC, TAG_VERSION, len(meta), stream.duration)
        rec = np.zeros(len(stream), RECORD)
        rec["t"] = stream.timestamps
        rec["ch"] = stream.channels
        with open(path, "wb") as f:
            f.write(pre.tobytes())
            f.write(meta + b"\x00" * pad)
            f.write(rec.tobytes())
    elif fmt == "csv":
        with open(path, "w", newline="") as f:
            f.write(f"# duration_ps={stream.duration}\n")
            f.write(f"# origin={meta.decode()}\n")
            f.write("timestamp_ps,channel\n")
            buf = _io.StringIO()
            np.savetxt(buf, np.column_stack([stream.timestamps, stream.channels]), fmt="%d", delimiter=",")
            f.write(buf.getvalue())
    else:
        raise ValueError(f"unknown format {fmt!r}")


@dataclass
class TagFile:
    """Memory-mapped binary tag file."""

    path: Path
    duration: int
    origin: dict
    records: np.ndarray

    def __len__(self):
        return self.records.shape[0]

    @property
    def timestamps(self):
        return self.records["t"]

    @property
    def channels(self):
        return self.records["ch"]

    def load(self) -> TimeTagStream:
        return TimeTagStream(self.timestamps.astype(np.int64), np.asarray(self.channels),
                             self.duration, self.origin)


def open_tags(path) -> TagFile:
    """Open a binary tag file without reading the records."""
    path = Path(path)
    size = path.stat().st_size
    if size < _PREAMBLE.itemsize:
        raise FormatError(f"{path}: truncated header")
    with open(path, "rb") as f:
        raw = f.read(_PREAMBLE.itemsize)
    if raw[:16] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    pre = np.frombuffer(raw, dtype=_PREAMBLE)[0]
    if pre["version"] != TAG_VERSION:
        raise FormatError(f"{path}: unsupported tag format version {int(pre['version'])}")
    mlen = int(pre["meta_len"])
    offset = _PREAMBLE.itemsize + mlen + (-mlen) % 16
    if offset > size or (size - offset) % RECORD.itemsize:
        raise FormatError(f"{path}: truncated or misaligned records")
    with open(path, "rb") as f:
        f.seek(_PREAMBLE.itemsize)
        try:
            origin = json.loads(f.read(mlen).decode()) if mlen else {}
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: bad metadata: {e}") from None
    n = (size - offset) // RECORD.itemsize
    rec = np.memmap(path, dtype=RECORD, mode="r", offset=offset, shape=(n,)) if n else np.zeros(0, RECORD)
    return TagFile(path, int(pre["duration"]), origin, rec)


def read_tags(path) -> TimeTagStream:
    """Read a tag file (binary or CSV, detected from the content)."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(16)
    if head == MAGIC:
        tf = open_tags(path)
        try:
            return tf.load()
        except ValueError as e:
            raise FormatError(f"{path}: {e}") from None
    if head.startswith(b"#") or head.startswith(b"timestamp_ps"):
        return _read_tags_csv(path)
    raise FormatError(f"{path}: bad magic bytes")


def _read_tags_csv(path) -> TimeTagStream:
    duration, origin = None, {}
    with open(path) as f:
        lines = f.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# duration_ps="):
            duration = int(line.split("=", 1)[1])
        elif line.startswith("# origin="):
            origin = json.loads(line.split("=", 1)[1])
        elif line.startswith("#") or not line.strip():
            continue
        else:
            body.append(line)
    if not body or body[0].replace(" ", "") != "timestamp_ps,channel":
        raise FormatError(f"{path}: missing 'timestamp_ps,channel' header")
    data = np.loadtxt(body[1:], delimiter=",", dtype=np.int64, ndmin=2) if len(body) > 1 \
        else np.zeros((0, 2), np.int64)
    if duration is None:
        duration = int(data[:, 0].max()) if data.size else 0
    try:
        return TimeTagStream(data[:, 0], data[:, 1], duration, origin)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def correlate_file(path, bin_width: float, max_lag: float, block: int = 1 << 22) -> G2Curve:
    """Linear cross-correlation of a binary tag file in bounded memory.

    Channel-0 tags are read block by block; each block is paired with the
    channel-1 tags inside its lag window, located by bisection on the mapped
    timestamps.  Normalization uses only tags within ``max_lag`` of either end
    of the record.  The result equals ``cross_correlate`` on the loaded stream.
    """
    tf = open_tags(path)
    bin_ps, half_bins = lag_grid(bin_width, max_lag, tf.duration)
    L = half_bins * bin_ps
    ts, ch = tf.timestamps, tf.channels
    n = len(tf)
    hist = np.zeros(2 * half_bins, dtype=np.int64)
    totals = [0, 0]
    for start in range(0, n, block):
        stop = min(n, start + block)
        tb = np.asarray(ts[start:stop], dtype=np.int64)
        cb = np.asarray(ch[start:stop])
        totals[1] += int(np.count_nonzero(cb))
        totals[0] += int(cb.size - np.count_nonzero(cb))
        t0 = tb[cb == 0]
        if not t0.size:
            continue
        lo = bisect.bisect_left(ts, t0[0] - L)
        hi = bisect.bisect_left(ts, t0[-1] + L)
        w_t = np.asarray(ts[lo:hi], dtype=np.int64)
        t1 = w_t[np.asarray(ch[lo:hi]) == 1]
        hist += _pair_histogram(t0, t1, 0, t0.size, L, bin_ps, hist.size)
    if totals[0] == 0 or totals[1] == 0:
        raise ValueError("both channels must contain tags")
    head_end = bisect.bisect_right(ts, L + bin_ps)
    tail_start = bisect.bisect_left(ts, tf.duration - L - bin_ps)
    counters = []
    for c in (0, 1):
        h_t = np.asarray(ts[:head_end], dtype=np.int64)
        t_t = np.asarray(ts[tail_start:], dtype=np.int64)
        head = h_t[np.asarray(ch[:head_end]) == c]
        tail = t_t[np.asarray(ch[tail_start:]) == c]
        counters.append(EdgeCounter(head, tail, totals[c]))
    return linear_curve(hist, half_bins, bin_ps, counters[0], counters[1], tf.duration)


# --------------------------------------------------------------------------
# result documents


def _curve_to_dict(c: G2Curve) -> dict:
    return {"lags": c.lags, "values": c.values, "errors": c.errors, "scheme": c.scheme,
            "edges": c.edges, "counts": c.counts, "norm": c.norm}


def _curve_from_dict(d: dict) -> G2Curve:
    norm = dict(d.get("norm") or {})
    for k in ("denominators", "bin_left", "bin_right", "block_denominators", "variance_factor"):
        if k in norm and norm[k] is not None:
            norm[k] = np.asarray(norm[k], dtype=float)
    if norm.get("block_counts") is not None:
        norm["block_counts"] = np.asarray(norm["block_counts"], dtype=np.int64)
    return G2Curve(lags=np.asarray(d["lags"], float), values=np.asarray(d["values"], float),
                   errors=np.asarray(d["errors"], float), scheme=d.get("scheme", "linear"),
                   edges=None if d.get("edges") is None else np.asarray(d["edges"], float),
                   counts=None if d.get("counts") is None else np.asarray(d["counts"], np.int64),
                   norm=norm)


def _fit_to_dict(r: FitResult) -> dict:
    d = {f.name: getattr(r, f.name) for f in fields(r)}
    d["param_names"] = list(r.param_names)
    return d


def _fit_from_dict(d: dict) -> FitResult:
    d = dict(d)
    d["covariance"] = np.asarray(d["covariance"], dtype=float)
    d["param_names"] = tuple(d.get("param_names", ()))
    return FitResult(**d)


def _hist_to_dict(h: TcspcHistogram) -> dict:
    return {"edges": h.edges, "counts": h.counts, "sync_count": h.sync_count}


def _hist_from_dict(d: dict) -> TcspcHistogram:
    counts = np.asarray(d["counts"])
    return TcspcHistogram(np.asarray(d["edges"], float), counts, int(d["sync_count"]))


@dataclass
class ResultDocument:
    kind: str
    payload: object
    provenance: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        enc = {
            "g2_curve": _curve_to_dict, "fit_result": _fit_to_dict, "tcspc": _hist_to_dict,
        }.get(self.kind, lambda p: p)
        body = {"schema_version": self.schema_version, "kind": self.kind,
                "provenance": self.provenance, "payload": enc(self.payload)}
        # repr-based float output is the shortest string that round-trips exactly
        return json.dumps(body, default=_json_default, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ResultDocument":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"not a result document: {e}") from None
        for k in ("schema_version", "kind", "payload"):
            if k not in d:
                raise FormatError(f"result document lacks '{k}'")
        if d["schema_version"] != SCHEMA_VERSION:
            raise FormatError(f"unsupported schema version {d['schema_version']}")
        dec = {"g2_curve": _curve_from_dict, "fit_result": _fit_from_dict,
               "tcspc": _hist_from_dict}.get(d["kind"], lambda p: p)
        try:
            payload = dec(d["payload"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad {d['kind']} payload: {e}") from None
        return cls(kind=d["kind"], payload=payload, provenance=d.get("provenance", {}),
                   schema_version=d["schema_version"])


def write_document(path, doc: ResultDocument) -> None:
    Path(path).write_text(doc.to_json(), encoding="utf-8")


def read_document(path) -> ResultDocument:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: not UTF-8 text") from None
    return ResultDocument.from_json(text)


def provenance(command: str, config: dict | None = None, seed=None) -> dict:
    return {"command": command, "tool": "spephot", "tool_version": __version__,
            "seed": seed, "config": dict(config or {})}


# --------------------------------------------------------------------------
# tabular inputs


def read_table(path, required, optional=()) -> dict:
    """Numeric CSV columns by header name; ``#`` lines are comments."""
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(line for line in f if line.strip() and not line.startswith("#"))]
    if not rows:
        raise FormatError(f"{path}: empty table")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in required if c not in header]
    if missing:
        raise FormatError(f"{path}: missing required column(s) {', '.join(missing)}")
    out = {}
    try:
        for c in list(required) + [c for c in optional if c in header]:
            k = header.index(c)
            out[c] = np.array([float(r[k]) for r in rows[1:]])
    except (ValueError, IndexError) as e:
        raise FormatError(f"{path}: bad value: {e}") from None
    return out


def write_table(path, columns: dict, comments=()) -> None:
    """CSV with ``#`` comment lines (gnuplot skips them)."""
    names = list(columns)
    n = max((len(v) for v in columns.values()), default=0)
    with open(path, "w", newline="") as f:
        for c in comments:
            f.write(f"# {c}\n")
        w = csv.writer(f)
        w.writerow(names)
        for i in range(n):
            w.writerow([_fmt(columns[k][i]) for k in names])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# --------------------------------------------------------------------------
# config

_UNITS = {
    "time": {"ps": 1e-3, "ns": 1.0, "us": 1e3, "μs": 1e3, "ms": 1e6, "s": 1e9},
    "power": {"nW": 1e-3, "uW": 1.0, "μW": 1.0, "mW": 1e3, "W": 1e6},
    "rate": {"/ns": 1.0, "/us": 1e-3, "/s": 1e-9, "Hz": 1e-9, "cps": 1e-9, "kHz": 1e-6, "MHz": 1e-3},
    "rate_coeff": {"/ns": 1.0},
    "alpha": {"/ns/uW": 1.0, "/ns/μW": 1.0},
    "inv_power": {"/uW": 1.0, "/μW": 1.0},
}

# key -> (kind, default)
CONFIG_KEYS = {
    "emitter": ("str", "E1"),
    "emitter_id": ("str", ""),
    "k21": ("rate_coeff", None),
    "k23": ("rate_coeff", None),
    "k31_0": ("rate_coeff", None),
    "alpha": ("alpha", None),
    "beta": ("inv_power", None),
    "power": ("power", 100.0),
    "duration": ("time", 1e7),
    "seed": ("int", None),
    "mode": ("str", "cw"),
    "rep_period": ("time", 12.5),
    "pulse_width": ("time", 0.032),
    "excitation_prob": ("float", 1.0),
    "efficiency": ("float", 1.0),
    "jitter_sigma": ("time", 0.0),
    "dead_time": ("time", 0.0),
    "dark_rate": ("rate", 0.0),
    "bin_width": ("time", 0.5),
    "max_lag": ("time", 500.0),
    "lag_min": ("time", 1.0),
    "lag_max": ("time", 1e6),
    "points_per_decade": ("int", 10),
    "chunks": ("int", 1),
    "blocks": ("int", 0),
    "tcspc_window": ("time", 12.5),
    "trace_bin": ("time", 1e7),
    "fit_model": ("str", "g2"),
    "shelving_mode": ("str", "power-dependent"),
}

_LINE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")


class ConfigError(ValueError):
    """Invalid configuration (usage error)."""


def parse_value(key: str, text: str):
    kind, _ = CONFIG_KEYS[key]
    if kind == "str":
        return text.strip().strip('"')
    if kind == "int":
        try:
            return int(float(text)) if text.strip().lower() != "none" else None
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    parts = text.split(None, 1)
    try:
        number = float(parts[0])
    except (ValueError, IndexError):
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if kind == "float":
        if len(parts) > 1:
            raise ConfigError(f"{key}: dimensionless value takes no unit")
        return number
    units = _UNITS[kind]
    if len(parts) == 1:
        raise ConfigError(f"{key}: missing unit (one of {', '.join(units)})")
    unit = parts[1].replace(" ", "")
    if unit not in units:
        raise ConfigError(f"{key}: unknown unit {parts[1]!r} (one of {', '.join(units)})")
    return number * units[unit]


def parse_config(text: str) -> dict:
    """Parse ``key = value unit`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        m = _LINE.match(line)
        if not m:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, val = m.group(1), m.group(2)
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = parse_value(key, val)
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    return parse_config(text)


def config_defaults() -> dict:
    return {k: v for k, (_, v) in CONFIG_KEYS.items()}
