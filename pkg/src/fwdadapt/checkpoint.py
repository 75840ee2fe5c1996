"""Single-file container for a model, its source statistics and run metadata.

Byte layout (all integers little endian)::

    0   4   magic  b"FWDC"
    4   2   format version (uint16, currently 1)
    6   2   reserved, zero
    8   8   header length H (uint64)
    16  H   header, UTF-8 JSON
    ..      zero padding up to the next multiple of 8
    P   ..  payload: raw C-order array bytes

The header holds ``arch``, ``config``, ``norm_registry``, ``weight_names``,
``quant_scales`` (name -> float), optional ``stats`` (``layers``, ``n``),
free-form ``meta``, and ``arrays``: a list of ``{name, dtype, shape, offset,
nbytes}`` with offsets relative to P. Array names are prefixed ``param/``
(float64 parameters), ``qweight/`` (int8 weights) and ``stats/mu/<l>`` or
``stats/sigma/<l>`` (float64 source statistics).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from fwdadapt.models import ModelGraph
from fwdadapt.sfaa import SourceStats

MAGIC = b"FWDC"
VERSION = 1
_PREFIX = struct.Struct("<4sHHQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ModelGraph
    stats: SourceStats | None = None
    meta: dict = field(default_factory=dict)


def _jsonable_config(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


def save_checkpoint(path, model: ModelGraph, stats: SourceStats | None = None, meta: dict | None = None) -> None:
    arrays = [(f"param/{n}", np.ascontiguousarray(v, dtype="<f8")) for n, v in model.params.items()]
    arrays += [(f"qweight/{n}", np.ascontiguousarray(q, dtype="i1")) for n, (q, _) in model.quant.items()]
    header = {
        "arch": model.arch,
        "config": _jsonable_config(model.config),
        "norm_registry": model.norm_registry,
        "weight_names": model.weight_names,
        "quant_scales": {n: float(s) for n, (_, s) in model.quant.items()},
        "meta": meta or {},
    }
    if stats is not None:
        header["stats"] = {"layers": [int(l) for l in stats.layers], "n": int(stats.n)}
        for l in stats.layers:
            arrays.append((f"stats/mu/{l}", np.ascontiguousarray(stats.mu[l], dtype="<f8")))
            arrays.append((f"stats/sigma/{l}", np.ascontiguousarray(stats.sigma[l], dtype="<f8")))
    table, offset = [], 0
    for name, a in arrays:
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                      "nbytes": a.nbytes})
        offset += a.nbytes
    header["arrays"] = table
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    pad = (-(_PREFIX.size + len(blob))) % 8
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, 0, len(blob)))
        f.write(blob)
        f.write(b"\0" * pad)
        for _, a in arrays:
            f.write(a.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, _, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    start = _PREFIX.size + hlen
    start += (-start) % 8
    arrays = {}
    for e in header["arrays"]:
        lo = start + e["offset"]
        if lo + e["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: array {e['name']} runs past end of file")
        a = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=int)), offset=lo)
        arrays[e["name"]] = a.reshape(e["shape"]).copy()

    cfg = header["config"]
    if header["arch"] == "cnn":
        cfg["channels"], cfg["strides"] = tuple(cfg["channels"]), tuple(cfg["strides"])
    params = {n[len("param/"):]: a.astype(np.float64) for n, a in arrays.items() if n.startswith("param/")}
    quant = {
        n[len("qweight/"):]: (a, header["quant_scales"][n[len("qweight/"):]])
        for n, a in arrays.items()
        if n.startswith("qweight/")
    }
    model = ModelGraph(header["arch"], cfg, params, header["norm_registry"], header["weight_names"], quant)
    stats = None
    if "stats" in header:
        layers = header["stats"]["layers"]
        stats = SourceStats(layers, {l: arrays[f"stats/mu/{l}"] for l in layers},
                            {l: arrays[f"stats/sigma/{l}"] for l in layers}, header["stats"]["n"])
    return Checkpoint(model, stats, header["meta"])
