"""Weight-set persistence.

Binary container (all integers little-endian u32, all reals little-endian
f64)::

    b"DGPL"                 magic
    version                 currently 1
    layer_count             k + 1
    meta_len                byte length of the UTF-8 JSON network spec
    meta                    NetworkSpec as JSON
    for each layer:
        rows, cols
        rows*cols f64       weight matrix, row-major
        rows f64            bias vector

Tiny networks can also be exchanged as JSON via :func:`to_json` /
:func:`from_json`.
"""
import json
import struct

import numpy as np

from .net_core import NetworkSpec, WeightSet

__all__ = ["MAGIC", "VERSION", "FormatError", "load_weights", "save_weights", "to_json", "from_json",
           "dumps", "loads"]

MAGIC = b"DGPL"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps(ws):
    meta = json.dumps(ws.spec.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<III", VERSION, len(ws.weights), len(meta)), meta]
    for w, b in zip(ws.weights, ws.biases):
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf):
    buf = memoryview(buf)
    if bytes(buf[:4]) != MAGIC:
        raise FormatError("bad magic at offset 0")
    if len(buf) < 16:
        raise FormatError("truncated header")
    version, n_layers, meta_len = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    pos = 16
    spec = NetworkSpec.from_dict(json.loads(bytes(buf[pos:pos + meta_len]).decode("utf-8")))
    pos += meta_len
    weights, biases = [], []
    for nu in range(n_layers):
        if pos + 8 > len(buf):
            raise FormatError(f"truncated layer header at offset {pos}")
        rows, cols = struct.unpack_from("<II", buf, pos)
        pos += 8
        need = 8 * (rows * cols + rows)
        if pos + need > len(buf):
            raise FormatError(f"truncated payload for layer {nu + 1} at offset {pos}")
        w = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
        pos += 8 * rows * cols
        b = np.frombuffer(buf, dtype="<f8", count=rows, offset=pos)
        pos += 8 * rows
        weights.append(w.astype(float))
        biases.append(b.astype(float))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes at offset {pos}")
    return WeightSet(spec, weights, biases)


def save_weights(ws, path):
    with open(path, "wb") as fh:
        fh.write(dumps(ws))


def load_weights(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def to_json(ws):
    return json.dumps({
        "spec": ws.spec.to_dict(),
        "weights": [w.tolist() for w in ws.weights],
        "biases": [b.tolist() for b in ws.biases],
    })


def from_json(text):
    d = json.loads(text)
    spec = NetworkSpec.from_dict(d["spec"])
    return WeightSet(spec, [np.array(w, dtype=float).reshape(spec.layer_shape(i + 1))
                            for i, w in enumerate(d["weights"])],
                     [np.array(b, dtype=float) for b in d["biases"]])
