"""Single-file binary checkpoints.

Layout:

    bytes 0..7    magic  b"NOVACKPT"
    bytes 8..11   format version, little-endian uint32
    bytes 12..19  index length in bytes, little-endian uint64
    index         UTF-8 JSON with sorted keys: model config, feature
                  schema, item catalog, training metadata, optional
                  optimizer scalars, and the tensor directory
    data          the tensors, little-endian float64, in directory order

The index makes the file self-describing: the model is rebuilt from it
alone, without the original config or item files. Tensors are written in
sorted-name order and the JSON is canonical, so saving a freshly loaded
checkpoint reproduces the original file byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from novabert.data import FeatureSpec, ItemCatalog, SideInfoSchema
from novabert.model import Model, ModelConfig

MAGIC = b"NOVACKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _schema_to_dict(schema):
    return [{"name": f.name, "kind": f.kind, "encoding": f.encoding,
             "buckets": f.buckets, "vocab": f.vocab}
            for f in schema.features]


def _schema_from_dict(items):
    feats = []
    for d in items:
        f = FeatureSpec(d["name"], d["kind"], d["encoding"],
                        buckets=d["buckets"])
        f.vocab = dict(d["vocab"])
        feats.append(f)
    return SideInfoSchema(feats)


def _catalog_to_dict(catalog):
    return {"raw_ids": catalog.raw_ids,
            "raw_features": catalog.raw_features,
            "features": catalog.features}


def _catalog_from_dict(d):
    raw_ids = list(d["raw_ids"])
    return ItemCatalog(raw_ids=raw_ids,
                       id_map={r: i + 1 for i, r in enumerate(raw_ids)},
                       features=d["features"],
                       raw_features=d["raw_features"])


def save_checkpoint(path, model, metadata=None, optimizer=None):
    names = sorted(model.params)
    directory = []
    offset = 0
    blobs = []
    tensors = {name: model.params[name].data for name in names}
    if optimizer is not None:
        for name in names:
            tensors[f"opt.m.{name}"] = optimizer.m[name]
            tensors[f"opt.v.{name}"] = optimizer.v[name]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        blob = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    index = {
        "config": dataclasses.asdict(model.config),
        "schema": _schema_to_dict(model.schema),
        "catalog": _catalog_to_dict(model.catalog),
        "metadata": dict(metadata or {}),
        "optimizer": {"t": optimizer.t} if optimizer is not None else None,
        "tensors": directory,
    }
    index_bytes = json.dumps(index, sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(index_bytes)))
        fh.write(index_bytes)
        for blob in blobs:
            fh.write(blob)


def read_index(path):
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 12)
        if head[:len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", head[8:12])
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {version}")
        (index_len,) = struct.unpack("<Q", head[12:20])
        index = json.loads(fh.read(index_len).decode("utf-8"))
        data_start = fh.tell()
    return index, data_start


def load_checkpoint(path):
    """Rebuild the model from a checkpoint file.

    Returns (model, metadata, optimizer_state) where optimizer_state is
    {"t": int, "m": dict, "v": dict} or None.
    """
    index, data_start = read_index(path)
    schema = _schema_from_dict(index["schema"])
    catalog = _catalog_from_dict(index["catalog"])
    config = ModelConfig(**index["config"])
    model = Model(config, schema, catalog, seed=0)

    arrays = {}
    with open(path, "rb") as fh:
        for entry in index["tensors"]:
            fh.seek(data_start + entry["offset"])
            blob = fh.read(entry["nbytes"])
            if len(blob) != entry["nbytes"]:
                raise CheckpointError(
                    f"{path}: truncated tensor {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(
                blob, dtype="<f8").reshape(entry["shape"]).astype(np.float64)

    for name, p in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape "
                f"{arrays[name].shape}, expected {p.data.shape}")
        p.data[:] = arrays[name]

    opt_state = None
    if index["optimizer"] is not None:
        opt_state = {"t": index["optimizer"]["t"],
                     "m": {n[len("opt.m."):]: a for n, a in arrays.items()
                           if n.startswith("opt.m.")},
                     "v": {n[len("opt.v."):]: a for n, a in arrays.items()
                           if n.startswith("opt.v.")}}
    return model, index["metadata"], opt_state
