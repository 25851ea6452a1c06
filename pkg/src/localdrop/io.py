"""Weight container, metrics.csv and run-manifest writers.

Weight container layout (version 1)::

    b"LDWT"                      4-byte magic
    uint32 LE                    format version
    uint32 LE                    header length in bytes
    header                       UTF-8 JSON: network spec, tensor table, keep states
    payload                      little-endian float64 tensors, in tensor-table order

Keep states live in the header: dense keep rates as float lists (JSON floats
round-trip exactly), DropBlock sites as ``{"d", "b", "t"}``.
"""
import csv
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .drop import DropBlockParams, KeepRateVector
from .net import NetworkSpec
from .optim import MetricsRow

MAGIC = b"LDWT"
VERSION = 1
METRICS_HEADER = ",".join(MetricsRow.FIELDS)


class ContainerError(ValueError):
    pass


def _state_to_json(state):
    if state is None:
        return None
    if isinstance(state, KeepRateVector):
        return {"theta": [float(t) for t in state.theta]}
    return {"d": state.d, "b": state.b, "t": list(state.t)}


def _state_from_json(d):
    if d is None:
        return None
    if "theta" in d:
        return KeepRateVector(np.array(d["theta"], dtype=np.float64))
    return DropBlockParams(d["d"], d["b"], tuple(d["t"]))


def save_weights(path, net, weights, keep_states=None, extra=None):
    tensors = []
    payload = []
    for idx in net.weight_layers:
        w = np.ascontiguousarray(weights[idx], dtype="<f8")
        tensors.append({"layer": idx, "kind": net.layers[idx].kind, "shape": list(w.shape)})
        payload.append(w.tobytes())
    header = {
        "network": net.to_dict(),
        "tensors": tensors,
        "keep_states": [_state_to_json(s) for s in keep_states] if keep_states is not None else None,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
        for p in payload:
            f.write(p)


def load_weights(path):
    """Returns ``(net, weights, keep_states, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a weight container (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise ContainerError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header ({exc})") from None
    net = NetworkSpec.from_dict(header["network"])
    weights = [None] * len(net.layers)
    offset = 12 + hlen
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        if tuple(net.weight_shape(t["layer"])) != shape:
            raise ContainerError(f"{path}: tensor for layer {t['layer']} has shape {shape}")
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise ContainerError(f"{path}: payload truncated at layer {t['layer']}")
        weights[t["layer"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes")
    states = header.get("keep_states")
    states = [_state_from_json(s) for s in states] if states is not None else None
    return net, weights, states, header.get("extra", {})


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class MetricsWriter:
    """Appends one row per epoch to metrics.csv, flushing after each row."""

    def __init__(self, path):
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(MetricsRow.FIELDS)
        self._last = 0

    def write(self, row):
        if row.epoch <= self._last:
            raise ValueError(f"epoch {row.epoch} after epoch {self._last}")
        self._last = row.epoch
        self._w.writerow([_fmt(getattr(row, name)) for name in MetricsRow.FIELDS])
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if ",".join(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [MetricsRow(int(r[0]), *(float(v) for v in r[1:])) for r in reader]


def write_manifest(path, payload):
    payload = dict(payload)
    payload.setdefault("localdrop_version", __version__)
    payload.setdefault("numpy_version", np.__version__)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
