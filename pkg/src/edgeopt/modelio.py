"""Binary model file: fixed preamble, JSON header, little-endian weight blob.

Layout (see docs/model-format.md)::

    0   4  magic  b"EOGM"
    4   4  u32 LE format version
    8   4  u32 LE header length L
    12  4  u32 LE CRC-32 of the header bytes
    16  L  UTF-8 JSON header
    16+L   weight blob (tensors back to back, row-major, little-endian)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib

import numpy as np

from .errors import ChecksumMismatch, FormatVersionMismatch, ModelFormatError
from .graph import Graph, LayerKind, LayerQuant, LayerSpec
from .tensor import DType, QuantParams, Tensor

MAGIC = b"EOGM"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIII")


def _graph_header(graph: Graph, blob: bytearray) -> dict:
    layers = []
    for layer in graph.layers:
        weights = {}
        for key in sorted(layer.weights):
            t = layer.weights[key]
            raw = t.data.astype(t.dtype.numpy, copy=False).tobytes(order="C")
            weights[key] = {
                "dtype": t.dtype.value,
                "shape": list(t.shape),
                "offset": len(blob),
                "nbytes": len(raw),
                "quant": t.quant.to_dict() if t.quant else None,
            }
            blob.extend(raw)
        layers.append({
            "name": layer.name,
            "kind": layer.kind.value,
            "inputs": list(layer.inputs),
            "output": layer.output,
            "attrs": layer.attrs,
            "quant": layer.quant.to_dict() if layer.quant else None,
            "weights": weights,
        })
    return {
        "name": graph.name,
        "input": {"name": graph.input_name, "shape": list(graph.input_shape), "dtype": "f32"},
        "output": graph.output,
        "num_classes": graph.num_classes,
        "ends_in_classifier": graph.ends_in_classifier,
        "layers": layers,
    }


def serialize(graph: Graph) -> bytes:
    blob = bytearray()
    header = {
        "format_version": FORMAT_VERSION,
        "graph": _graph_header(graph, blob),
        "blob": {"size": len(blob), "sha256": hashlib.sha256(blob).hexdigest()},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    pre = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(hbytes), zlib.crc32(hbytes))
    return pre + hbytes + bytes(blob)


def deserialize(data: bytes) -> Graph:
    if len(data) < _PREAMBLE.size:
        raise ChecksumMismatch("file shorter than the fixed preamble")
    magic, version, hlen, hcrc = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
    hbytes = data[_PREAMBLE.size:_PREAMBLE.size + hlen]
    if len(hbytes) != hlen or zlib.crc32(hbytes) != hcrc:
        raise ChecksumMismatch("header checksum mismatch")
    header = json.loads(hbytes.decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"header format version {header.get('format_version')}")
    blob = data[_PREAMBLE.size + hlen:]
    if len(blob) != header["blob"]["size"] or hashlib.sha256(blob).hexdigest() != header["blob"]["sha256"]:
        raise ChecksumMismatch("weight blob checksum mismatch")
    return graph_from_header(header["graph"], blob)


def graph_from_header(g: dict, blob: bytes) -> Graph:
    layers = []
    for ld in g["layers"]:
        weights = {}
        for key, wd in ld["weights"].items():
            dtype = DType(wd["dtype"])
            raw = blob[wd["offset"]:wd["offset"] + wd["nbytes"]]
            arr = np.frombuffer(raw, dtype=dtype.numpy).reshape(wd["shape"])
            quant = QuantParams.from_dict(wd["quant"]) if wd["quant"] else None
            weights[key] = Tensor(arr, dtype, quant)
        layers.append(LayerSpec(
            name=ld["name"],
            kind=LayerKind(ld["kind"]),
            inputs=tuple(ld["inputs"]),
            output=ld["output"],
            attrs=ld["attrs"],
            weights=weights,
            quant=LayerQuant.from_dict(ld["quant"]) if ld["quant"] else None,
        ))
    return Graph(
        name=g["name"],
        input_name=g["input"]["name"],
        input_shape=tuple(g["input"]["shape"]),
        layers=tuple(layers),
        output=g["output"],
        num_classes=g["num_classes"],
        ends_in_classifier=g.get("ends_in_classifier", True),
    )


def save_model(graph: Graph, path) -> int:
    data = serialize(graph)
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(os.fspath(path), "wb") as fh:
        fh.write(data)
    return len(data)


def load_model(path) -> Graph:
    with open(os.fspath(path), "rb") as fh:
        return deserialize(fh.read())
