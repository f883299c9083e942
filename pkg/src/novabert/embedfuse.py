"""Embedding tables and the fusion functions producing integrated vectors.

All tables share width h. Fusion always receives the item-ID representation
as its first input, then item-related features, behavior-related features,
and finally position (position is just another behavior feature here).
Output width is h for every fusion kind and any feature count.
"""

from __future__ import annotations

import math

import numpy as np

from novabert import tensor as T
from novabert.tensor import Tensor

EMB_INIT = 0.02  # uniform [-EMB_INIT, EMB_INIT] for all embedding tables


def init_embeddings(schema, catalog, h, L, rng, features=None, use_position=True,
                    dtype=np.float64):
    """Parameter tensors for the ID table, position table and feature tables.

    features limits which schema features get tables (None = all).
    """
    def table(rows):
        return Tensor(rng.uniform(-EMB_INIT, EMB_INIT, size=(rows, h)).astype(dtype),
                      requires_grad=True)

    params = {"emb.id": table(catalog.m + 2)}
    if use_position:
        params["emb.pos"] = table(L + 1)
    for f in schema.features:
        if features is not None and f.name not in features:
            continue
        params[f"emb.f.{f.name}"] = table(f.vocab_size)
    return params


def init_fusion_params(kind, k, h, rng, dtype=np.float64):
    """Trainable fusion parameters for k fused inputs of width h.

    concat: FC from k*h back to h (Xavier-uniform weight, zero bias).
    gating: the h->1 gate projection, zero-initialized so gates start uniform.
    add: parameter-free.
    """
    if kind == "add":
        return {}
    if kind == "concat":
        bound = math.sqrt(6.0 / (k * h + h))
        return {
            "w": Tensor(rng.uniform(-bound, bound, size=(k * h, h)).astype(dtype),
                        requires_grad=True),
            "b": Tensor(np.zeros(h, dtype=dtype), requires_grad=True),
        }
    if kind == "gating":
        return {"wf": Tensor(np.zeros((h, 1), dtype=dtype), requires_grad=True)}
    raise ValueError(f"unknown fusion kind {kind!r}")


def fuse_add(features):
    if not features:
        raise ValueError("fusion needs at least one input")
    width = features[0].shape[-1]
    for f in features[1:]:
        if f.shape[-1] != width:
            raise ValueError(f"fusion width mismatch: {f.shape[-1]} vs {width}")
    out = features[0]
    for f in features[1:]:
        out = T.add(out, f)
    return out


def fuse_concat(features, w, b):
    k = len(features)
    h = features[0].shape[-1]
    if w.shape[0] != k * h:
        raise ValueError(f"concat FC expects {w.shape[0] // h} inputs, got {k}")
    cat = T.concat_lastdim(features)
    return T.add(T.matmul(cat, w), b)


def fuse_gating(features, wf, mode="softmax"):
    """Convex (softmax mode) or independent (sigmoid mode) gated sum.

    Gate logits are each feature's inner product with the gate vector wf.
    Returns (fused, gates) with gates shaped [..., k].
    """
    fmat = T.stack(features, axis=-2)                       # [..., k, h]
    logits = T.matmul(fmat, wf)                             # [..., k, 1]
    k = len(features)
    logits = T.reshape(logits, logits.shape[:-2] + (k,))    # [..., k]
    if mode == "softmax":
        gates = T.softmax_lastdim(logits)
    elif mode == "sigmoid":
        gates = T.sigmoid(logits)
    else:
        raise ValueError(f"unknown gating mode {mode!r}")
    grow = T.reshape(gates, gates.shape[:-1] + (1, k))      # [..., 1, k]
    out = T.matmul(grow, fmat)                              # [..., 1, h]
    return T.reshape(out, out.shape[:-2] + (out.shape[-1],)), gates


def apply_fusion(kind, features, fusion_params, gating_mode="softmax"):
    if kind == "add":
        return fuse_add(features)
    if kind == "concat":
        return fuse_concat(features, fusion_params["w"], fusion_params["b"])
    if kind == "gating":
        out, _ = fuse_gating(features, fusion_params["wf"], mode=gating_mode)
        return out
    raise ValueError(f"unknown fusion kind {kind!r}")


def embed_side_features(batch, params, schema, features=None, use_position=True):
    """Embed every side feature of a batch; multi-valued ones are mean-pooled.

    Returns width-h tensors ordered: item features, behavior features,
    position."""
    out = []
    for group in ("item", "behavior"):
        for f in schema.features:
            if f.kind != group:
                continue
            if features is not None and f.name not in features:
                continue
            table = params[f"emb.f.{f.name}"]
            idx = batch.features[f.name]
            emb = T.embedding_lookup(table, idx)
            if idx.ndim == 3:  # multi-valued: mean over the real entries
                present = (idx != 0)
                count = np.maximum(present.sum(axis=-1, keepdims=True), 1)
                weights = present.astype(table.dtype) / count
                emb = T.tsum(T.mul(emb, weights[..., None]), axis=-2)
            out.append(emb)
    if use_position:
        out.append(T.embedding_lookup(params["emb.pos"], batch.positions))
    return out


def integrated_embeddings(batch, params, schema, fusion_kind, fusion_params,
                          hidden=None, features=None, use_position=True,
                          gating_mode="softmax", side=None):
    """Integrated representation R and the pure ID branch R_id.

    hidden, when given, replaces the ID-table lookup as the first fusion
    input (the NOVA layers re-fuse their running hidden state). side may
    carry pre-embedded side features so the NOVA stack reuses the exact
    same tensors at every layer.
    """
    r_id = hidden if hidden is not None else T.embedding_lookup(
        params["emb.id"], batch.items)
    if side is None:
        side = embed_side_features(batch, params, schema, features=features,
                                   use_position=use_position)
    r = apply_fusion(fusion_kind, [r_id] + list(side), fusion_params,
                     gating_mode=gating_mode)
    return r, r_id
