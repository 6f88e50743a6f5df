"""File formats.

Tensor file (``.tensor``)::

    magic   4 bytes  b"LGT1"
    ndim    uint32 little-endian
    dims    ndim x uint32 little-endian
    data    prod(dims) x float32 little-endian, C order

Network files are a JSON manifest plus a weight blob of little-endian float32
values.  The manifest looks like::

    {"format": "lisfguard-network/1", "name": ..., "input_shape": [C, H, W],
     "class_count": n, "split_index": null | int, "weights_file": "x.bin",
     "layers": [{"kind": "conv", "in_ch": .., "out_ch": .., "k": .., "s": .., "p": ..,
                 "weight": {"offset": o, "count": n}, "bias": {...}},
                {"kind": "relu"}, {"kind": "maxpool", "k": .., "s": ..},
                {"kind": "gap"}, {"kind": "fc", "in_features": .., "out_features": ..,
                 "weight": {...}, "bias": {...}}]}

``offset``/``count`` are in float32 elements.  With ``inline=True`` the
weights are written into the manifest as flat lists (``{"values": [...]}``)
and no blob is produced.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor_net import Conv, FullyConnected, GlobalAvgPool, MaxPool, Network, ReLU

MAGIC = b"LGT1"
NETWORK_FORMAT = "lisfguard-network/1"


def tensor_to_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a tensor file")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    start = 8 + 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    if len(buf) != start + 4 * count:
        raise ValueError("tensor file has trailing or missing bytes")
    return data.reshape(dims).astype(np.float32)


def save_tensor(path, a: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(a))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def network_to_manifest(net: Network, inline: bool = False) -> tuple[dict, np.ndarray]:
    blob: list[np.ndarray] = []
    offset = 0

    def put(a):
        nonlocal offset
        flat = np.asarray(a, dtype=np.float32).reshape(-1)
        if inline:
            return {"values": flat.tolist()}
        ref = {"offset": offset, "count": int(flat.size)}
        blob.append(flat)
        offset += flat.size
        return ref

    layers = []
    for layer in net.layers:
        if isinstance(layer, Conv):
            d = {"kind": "conv", "in_ch": layer.in_ch, "out_ch": layer.out_ch,
                 "k": layer.k, "s": layer.s, "p": layer.p}
            if layer.weight is not None:
                d["weight"], d["bias"] = put(layer.weight), put(layer.bias)
        elif isinstance(layer, FullyConnected):
            d = {"kind": "fc", "in_features": layer.in_features, "out_features": layer.out_features}
            if layer.weight is not None:
                d["weight"], d["bias"] = put(layer.weight), put(layer.bias)
        elif isinstance(layer, MaxPool):
            d = {"kind": "maxpool", "k": layer.k, "s": layer.s}
        elif isinstance(layer, ReLU):
            d = {"kind": "relu"}
        elif isinstance(layer, GlobalAvgPool):
            d = {"kind": "gap"}
        else:
            raise TypeError(f"cannot serialize {layer!r}")
        layers.append(d)
    manifest = {"format": NETWORK_FORMAT, "name": net.name, "input_shape": list(net.input_shape),
                "class_count": net.class_count, "split_index": net.split_index, "layers": layers}
    weights = np.concatenate(blob) if blob else np.zeros(0, np.float32)
    return manifest, weights


def network_from_manifest(manifest: dict, weights: np.ndarray | None = None) -> Network:
    if manifest.get("format") != NETWORK_FORMAT:
        raise ValueError(f"unknown network format {manifest.get('format')!r}")

    def get(ref, shape):
        if ref is None:
            return None
        if "values" in ref:
            a = np.asarray(ref["values"], dtype=np.float32)
        else:
            if weights is None:
                raise ValueError("manifest references a weight blob that was not supplied")
            a = weights[ref["offset"]:ref["offset"] + ref["count"]]
        return a.reshape(shape).astype(np.float32)

    layers = []
    for d in manifest["layers"]:
        kind = d["kind"]
        if kind == "conv":
            shape = (d["out_ch"], d["in_ch"], d["k"], d["k"])
            layers.append(Conv(d["in_ch"], d["out_ch"], d["k"], d["s"], d["p"],
                               get(d.get("weight"), shape), get(d.get("bias"), (d["out_ch"],))))
        elif kind == "fc":
            shape = (d["out_features"], d["in_features"])
            layers.append(FullyConnected(d["in_features"], d["out_features"],
                                         get(d.get("weight"), shape), get(d.get("bias"), (d["out_features"],))))
        elif kind == "maxpool":
            layers.append(MaxPool(d["k"], d["s"]))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "gap":
            layers.append(GlobalAvgPool())
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Network(layers, tuple(manifest["input_shape"]), manifest["class_count"],
                   manifest.get("split_index"), manifest.get("name", "net"))


def save_network(net: Network, path, inline: bool = False) -> None:
    path = Path(path)
    manifest, weights = network_to_manifest(net, inline)
    if not inline:
        blob = path.with_suffix(".bin")
        manifest["weights_file"] = blob.name
        blob.write_bytes(np.ascontiguousarray(weights, dtype="<f4").tobytes())
    path.write_text(json.dumps(manifest, indent=1))


def load_network(path) -> Network:
    path = Path(path)
    manifest = json.loads(path.read_text())
    weights = None
    if "weights_file" in manifest:
        weights = np.frombuffer((path.parent / manifest["weights_file"]).read_bytes(), dtype="<f4")
    return network_from_manifest(manifest, weights)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
