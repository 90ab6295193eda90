"""Readers and writers for timestamp streams and histograms.

Streams: CSV ``channel,timestamp_ps``, JSON ``{"channel": [...], "timestamp_ps": [...]}``,
and the packed ``HOMT`` binary (magic, version byte, little-endian
``u8 channel, u64 timestamp`` records). Histograms: CSV
``tau_ps,count,normalized`` and JSON with a metadata block.
"""
from __future__ import annotations

import csv
import io as _io
import json
from pathlib import Path

import numpy as np

from .correlate import CorrelationError, Histogram
from .sim import Detections

MAGIC = b"HOMT"
VERSION = 1
RECORD = np.dtype([("channel", "u1"), ("timestamp", "<u8")])
FORMATS = ("csv", "json", "bin")
SUFFIX = {"csv": ".csv", "json": ".json", "bin": ".homt"}


class StreamFormatError(ValueError):
    """Corrupt or unsupported stream/histogram file."""


def _detections(channel: np.ndarray, ts: np.ndarray) -> Detections:
    return Detections(np.asarray(channel, np.uint8), np.asarray(ts, np.int64))


def write_stream(path: str | Path, det: Detections, fmt: str = "csv") -> Path:
    path = Path(path)
    ch = np.asarray(det.channel, np.uint8)
    ts = np.asarray(det.timestamp, np.int64)
    if fmt == "csv":
        buf = _io.StringIO()
        buf.write("channel,timestamp_ps\n")
        if len(ch):
            np.savetxt(buf, np.column_stack([ch, ts]), fmt="%d", delimiter=",")
        path.write_text(buf.getvalue())
    elif fmt == "json":
        path.write_text(json.dumps({"channel": ch.tolist(), "timestamp_ps": ts.tolist()}))
    elif fmt == "bin":
        rec = np.empty(len(ch), RECORD)
        rec["channel"] = ch
        rec["timestamp"] = ts.astype(np.uint64)
        with open(path, "wb") as fh:
            fh.write(MAGIC + bytes([VERSION]))
            fh.write(rec.tobytes())
    else:
        raise ValueError(f"unknown stream format {fmt!r}; expected one of {FORMATS}")
    return path


def _sniff(path: Path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return "bin"
    if head[:1] in (b"{", b"["):
        return "json"
    return "csv"


def read_stream(path: str | Path, fmt: str | None = None) -> Detections:
    """Read a stream; the format is detected from the content when not given."""
    path = Path(path)
    fmt = fmt or _sniff(path)
    if fmt == "bin":
        raw = path.read_bytes()
        if raw[:4] != MAGIC:
            raise StreamFormatError(f"{path}: missing HOMT magic")
        if len(raw) < 5 or raw[4] != VERSION:
            raise StreamFormatError(f"{path}: unsupported HOMT version")
        body = raw[5:]
        if len(body) % RECORD.itemsize:
            raise StreamFormatError(f"{path}: truncated record")
        rec = np.frombuffer(body, RECORD)
        ts = rec["timestamp"]
        if len(ts) and ts.max() > np.iinfo(np.int64).max:
            raise StreamFormatError(f"{path}: timestamp out of range")
        return _detections(rec["channel"], ts.astype(np.int64))
    if fmt == "json":
        try:
            d = json.loads(path.read_text())
            ch, ts = d["channel"], d["timestamp_ps"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise StreamFormatError(f"{path}: not a JSON stream ({exc})") from exc
        if len(ch) != len(ts):
            raise StreamFormatError(f"{path}: channel/timestamp length mismatch")
        return _detections(np.array(ch, np.int64), np.array(ts, np.int64))
    if fmt == "csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [c.strip() for c in rows[0]] != ["channel", "timestamp_ps"]:
            raise StreamFormatError(f"{path}: expected header 'channel,timestamp_ps'")
        try:
            arr = np.array([[int(a), int(b)] for a, b in rows[1:]], np.int64).reshape(-1, 2)
        except ValueError as exc:
            raise StreamFormatError(f"{path}: malformed row ({exc})") from exc
        if np.any(arr[:, 0] < 0) or np.any(arr[:, 0] > 255):
            raise StreamFormatError(f"{path}: channel out of range")
        return _detections(arr[:, 0], arr[:, 1])
    raise ValueError(f"unknown stream format {fmt!r}")


def split_channels(det: Detections, channels: tuple[int, int] = (0, 1)) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel sorted timestamp arrays; raises if a channel is unsorted."""
    out = []
    for c in channels:
        t = np.asarray(det.timestamp[det.channel == c], np.int64)
        if len(t) > 1 and np.any(np.diff(t) < 0):
            raise CorrelationError(f"channel {c} timestamps are not sorted")
        out.append(t)
    return out[0], out[1]


# ---------------------------------------------------------------- histograms

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_histogram(path: str | Path, hist: Histogram, fmt: str = "csv") -> Path:
    path = Path(path)
    if fmt == "csv":
        buf = _io.StringIO()
        buf.write(f"# bin_edges_ps={hist.bin_edges[0]:.17g}:{hist.bin_width:.17g}:{len(hist.counts)}\n")
        buf.write(f"# normalization={hist.normalization} divisor={hist.divisor!r}\n")
        buf.write("tau_ps,count,normalized\n")
        for c, n, v in zip(hist.centers, hist.counts, hist.normalized):
            buf.write(f"{c:.17g},{int(n)},{float(v):.17g}\n")
        path.write_text(buf.getvalue())
    elif fmt == "json":
        doc = {
            "bin_edges_ps": hist.bin_edges.tolist(),
            "tau_ps": hist.centers.tolist(),
            "count": np.asarray(hist.counts).astype(int).tolist(),
            "normalized": np.asarray(hist.normalized, float).tolist(),
            "metadata": _jsonable({**hist.metadata, "normalization_method": hist.normalization,
                                   "divisor": hist.divisor}),
        }
        path.write_text(json.dumps(doc))
    else:
        raise ValueError(f"unknown histogram format {fmt!r}")
    return path


def read_histogram(path: str | Path) -> Histogram:
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            d = json.loads(text)
            meta = d.get("metadata", {})
            return Histogram(np.array(d["bin_edges_ps"], float), np.array(d["count"], np.int64),
                             np.array(d["normalized"], float), meta.get("normalization_method", "none"),
                             float(meta.get("divisor", 1.0)), meta)
        except (KeyError, TypeError, ValueError) as exc:
            raise StreamFormatError(f"{path}: not a histogram JSON ({exc})") from exc
    lines = text.splitlines()
    edges_spec, norm, div = None, "none", 1.0
    body = []
    for line in lines:
        if line.startswith("#"):
            for tok in line[1:].split():
                k, _, v = tok.partition("=")
                if k == "bin_edges_ps":
                    edges_spec = v
                elif k == "normalization":
                    norm = v
                elif k == "divisor":
                    div = float(v)
        elif line.strip():
            body.append(line)
    if not body or body[0].replace(" ", "") != "tau_ps,count,normalized":
        raise StreamFormatError(f"{path}: expected header 'tau_ps,count,normalized'")
    try:
        arr = np.array([[float(x) for x in ln.split(",")] for ln in body[1:]]).reshape(-1, 3)
    except ValueError as exc:
        raise StreamFormatError(f"{path}: malformed row ({exc})") from exc
    if edges_spec:
        lo, w, n = edges_spec.split(":")
        edges = float(lo) + float(w) * np.arange(int(n) + 1)
    else:
        if len(arr) < 2:
            raise StreamFormatError(f"{path}: cannot infer bin edges")
        w = arr[1, 0] - arr[0, 0]
        edges = np.append(arr[:, 0] - w / 2, arr[-1, 0] + w / 2)
    return Histogram(edges, arr[:, 1].astype(np.int64), arr[:, 2], norm, div)
