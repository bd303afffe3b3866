"""Versioned single-file container for a HybridModel.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"ICDMODEL"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header, keys sorted
    20+H    pad   zero bytes up to the next multiple of 8
    ...           array blob; every array starts on an 8-byte boundary

The header carries the architecture (channels, input side), thresholds,
provenance, seed, forest config, free-form metadata and an ``arrays`` table
of ``{name, dtype, shape, offset, nbytes}`` entries, offsets relative to the
start of the blob. Network weights are stored under ``param/<name>``; the
forest is flattened into ``forest/offsets`` (n_trees + 1 node offsets) plus
one concatenated array per node attribute. Arrays are written raw in
little-endian order, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Union

import numpy as np

from .forest import ForestConfig, ForestModel, Tree
from .hybrid import HybridModel

MAGIC = b"ICDMODEL"
VERSION = 1
_TREE_FIELDS = ("feature", "threshold", "left", "right", "value")


class ModelFormatError(ValueError):
    pass


class ModelVersionError(ModelFormatError):
    pass


def _arrays(model: HybridModel) -> dict:
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    trees = model.forest.trees
    offsets = np.zeros(len(trees) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([t.n_nodes for t in trees])
    arrays["forest/offsets"] = offsets
    for f in _TREE_FIELDS:
        arrays[f"forest/{f}"] = np.concatenate([getattr(t, f) for t in trees])
    return arrays


def dumps(model: HybridModel) -> bytes:
    blobs, table, pos = [], [], 0
    for name, arr in _arrays(model).items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": pos, "nbytes": len(raw)})
        pad = (-len(raw)) % 8
        blobs.append(raw + b"\0" * pad)
        pos += len(raw) + pad
    fc = asdict(model.forest.config)
    header = {
        "architecture": {"channels": [int(model.params["conv1_w"].shape[1])] +
                         [int(model.params[k].shape[0]) for k in model.params
                          if k.startswith("conv") and k.endswith("_w")],
                         "kernel": 3, "input_side": model.input_side},
        "patch_threshold": model.patch_threshold,
        "slide_threshold": model.slide_threshold,
        "provenance": model.provenance,
        "seed": model.seed,
        "forest": {"config": fc, "n_features": model.forest.n_features,
                   "seed": model.forest.seed},
        "meta": model.meta,
        "arrays": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes)
    out += b"\0" * ((-len(out)) % 8)
    for b in blobs:
        out += b
    return bytes(out)


def loads(data: bytes) -> HybridModel:
    if data[:8] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise ModelVersionError(f"model format version {version}, this build reads {VERSION}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    start = 20 + hlen
    start += (-start) % 8
    arrays = {}
    for entry in header["arrays"]:
        off = start + entry["offset"]
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"])),
                            offset=off).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    offsets = arrays["forest/offsets"]
    trees = []
    for i in range(len(offsets) - 1):
        a, b = int(offsets[i]), int(offsets[i + 1])
        trees.append(Tree(*(arrays[f"forest/{f}"][a:b].copy() for f in _TREE_FIELDS)))
    fh = header["forest"]
    cfg = fh["config"]
    forest = ForestModel(trees, int(fh["n_features"]), ForestConfig(**cfg), int(fh["seed"]))
    return HybridModel(params, forest, header["patch_threshold"], header["slide_threshold"],
                       header["provenance"], int(header["architecture"]["input_side"]),
                       int(header["seed"]), header["meta"])


def save_model(model: HybridModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(dumps(model))
    return path


def load_model(path: Union[str, Path]) -> HybridModel:
    return loads(Path(path).read_bytes())
