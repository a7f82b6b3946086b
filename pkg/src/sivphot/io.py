"""File formats: binary timestamp streams, delimited tables, JSON results.

Timestamp file (little endian)::

    8s   magic  b"SIVTTAG1"
    u4   format version
    u4   channel count
    u8   tick length in femtoseconds (1000 = 1 ps)
    u8   duration in ticks
    u8   events per channel (channel count times)
    u4   metadata length, then that many bytes of UTF-8 JSON
    u8   sorted tick values, channel after channel

A text variant with one ``channel<TAB>time_ns`` pair per line (channel
``0``/``1`` or ``a``/``b``, ``#`` comments) is accepted on input; a
``# duration_ns: <value>`` comment sets the duration.

Tables are tab-delimited with ``#``-prefixed header lines: first
``# key: <json>`` metadata, then one line naming the columns with units in
brackets.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .correlation import G2Histogram
from .emitter_sim import TICKS_PER_NS, TimestampStream
from .errors import FileFormatError

MAGIC = b"SIVTTAG1"
VERSION = 1
TICK_FS = 1000


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2)


def write_json(path, obj):
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from exc


# --- timestamps ---------------------------------------------------------

def write_timestamps(path, stream: TimestampStream):
    meta = dumps(stream.metadata).encode()
    chans = stream.channels()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQQ", VERSION, len(chans), TICK_FS, stream.duration_ticks))
        fh.write(struct.pack(f"<{len(chans)}Q", *(c.size for c in chans)))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for c in chans:
            fh.write(c.astype("<u8").tobytes())


def _read_binary(path) -> TimestampStream:
    data = Path(path).read_bytes()
    try:
        pos = len(MAGIC)
        version, n_ch, tick_fs, duration = struct.unpack_from("<IIQQ", data, pos)
        pos += 24
        if version != VERSION:
            raise FileFormatError(f"{path}: unsupported version {version}")
        if tick_fs != TICK_FS:
            raise FileFormatError(f"{path}: tick of {tick_fs} fs is not supported")
        if n_ch != 2:
            raise FileFormatError(f"{path}: expected 2 channels, found {n_ch}")
        counts = struct.unpack_from(f"<{n_ch}Q", data, pos)
        pos += 8 * n_ch
        (meta_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos:pos + meta_len].decode()) if meta_len else {}
        pos += meta_len
        chans = []
        for n in counts:
            chans.append(np.frombuffer(data, dtype="<u8", count=n, offset=pos).astype(np.int64))
            pos += 8 * n
    except (struct.error, ValueError) as exc:
        raise FileFormatError(f"{path}: truncated or corrupt timestamp file ({exc})") from exc
    if pos != len(data):
        raise FileFormatError(f"{path}: {len(data) - pos} trailing bytes")
    stream = TimestampStream(chans[0], chans[1], duration, meta)
    try:
        stream.validate()
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    return stream


def _read_text(path) -> TimestampStream:
    duration_ns = None
    chans = ([], [])
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                if key.strip() == "duration_ns":
                    duration_ns = float(val)
                continue
            parts = line.split()
            if len(parts) != 2 or parts[0] not in ("0", "1", "a", "b"):
                raise FileFormatError(f"{path}:{lineno}: expected 'channel<TAB>time_ns'")
            try:
                t = float(parts[1])
            except ValueError as exc:
                raise FileFormatError(f"{path}:{lineno}: bad time {parts[1]!r}") from exc
            chans[parts[0] in ("1", "b")].append(t)
    ticks = [np.unique(np.rint(np.asarray(c) * TICKS_PER_NS).astype(np.int64)) for c in chans]
    last = max((int(t[-1]) for t in ticks if t.size), default=0)
    duration = int(round(duration_ns * TICKS_PER_NS)) if duration_ns is not None else last + 1
    stream = TimestampStream(ticks[0], ticks[1], duration, {"source": str(path)})
    try:
        stream.validate()
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    return stream


def read_timestamps(path) -> TimestampStream:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        return _read_binary(path)
    return _read_text(path)


# --- delimited tables ----------------------------------------------------

def write_table(path, columns: dict, units: dict | None = None, meta: dict | None = None):
    """Tab-delimited table; ``columns`` maps names to equal-length arrays."""
    units = units or {}
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    n = {a.size for a in arrays}
    if len(n) > 1:
        raise ValueError("columns must have equal length")
    lines = [f"# {k}: {json.dumps(_clean(v), sort_keys=True)}" for k, v in (meta or {}).items()]
    lines.append("# " + "\t".join(f"{c} [{units[c]}]" if c in units else c for c in names))
    for row in zip(*arrays):
        lines.append("\t".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return repr(float(v))


def read_table(path):
    """Returns (columns dict of float arrays, units dict, metadata dict)."""
    meta, header, rows = {}, None, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                key, sep, val = body.partition(": ")
                if sep and "\t" not in body:
                    try:
                        meta[key] = json.loads(val)
                        continue
                    except json.JSONDecodeError:
                        pass
                header = body.split("\t")
                continue
            try:
                rows.append([float(x) for x in line.split("\t")])
            except ValueError as exc:
                raise FileFormatError(f"{path}:{lineno}: non-numeric value") from exc
    if header is None:
        raise FileFormatError(f"{path}: missing '#' column header")
    names, units = [], {}
    for h in header:
        name, _, unit = h.partition(" [")
        names.append(name.strip())
        if unit:
            units[name.strip()] = unit.rstrip("]")
    if any(len(r) != len(names) for r in rows):
        raise FileFormatError(f"{path}: rows do not match the {len(names)}-column header")
    data = np.array(rows, dtype=float).reshape(-1, len(names))
    return {n: data[:, i] for i, n in enumerate(names)}, units, meta


def write_histogram(path, hist: G2Histogram, meta: dict | None = None):
    meta = dict(meta or {})
    meta["norm_constant"] = hist.norm_constant
    write_table(path, {"tau_lo": hist.bin_edges[:-1], "tau_hi": hist.bin_edges[1:],
                       "counts": hist.counts, "g2": hist.normalized},
                {"tau_lo": "ns", "tau_hi": "ns"}, meta)


def read_histogram(path) -> G2Histogram:
    cols, _, meta = read_table(path)
    for c in ("tau_lo", "tau_hi", "counts"):
        if c not in cols:
            raise FileFormatError(f"{path}: histogram needs column {c!r}")
    if "norm_constant" not in meta:
        raise FileFormatError(f"{path}: histogram needs a norm_constant header entry")
    edges = np.append(cols["tau_lo"], cols["tau_hi"][-1:])
    return G2Histogram(edges, cols["counts"], float(meta["norm_constant"]))
