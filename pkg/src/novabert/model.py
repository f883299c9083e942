"""BERT-style encoder with invasive and non-invasive (NOVA) attention.

Invasive mode fuses side information into the item representations once,
before layer 1, and runs plain multi-head self-attention. NOVA mode keeps
the hidden state in the pure item-ID space: every layer re-fuses the (fixed)
side-feature embeddings with the current hidden state to form Q and K, while
V reads the hidden state alone. The decoder is tied to the item-ID table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from novabert import embedfuse as EF
from novabert import tensor as T
from novabert.tensor import Tensor

FFN_MULT = 4  # inner feed-forward width, per original BERT


@dataclass
class ModelConfig:
    hidden_size: int
    num_heads: int
    num_layers: int
    max_len: int
    attention: str = "nova"            # "invasive" | "nova"
    fusion: str = "add"                # "add" | "concat" | "gating"
    dropout: float = 0.1
    mask_prob: float = 0.2
    features: list[str] | None = None  # None = every schema feature
    use_position: bool = True
    gating_mode: str = "softmax"       # "softmax" | "sigmoid"

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.attention not in ("invasive", "nova"):
            raise ValueError(f"unknown attention kind {self.attention!r}")
        if self.fusion not in ("add", "concat", "gating"):
            raise ValueError(f"unknown fusion kind {self.fusion!r}")

    @property
    def d_k(self):
        return self.hidden_size // self.num_heads

    def active_features(self, schema):
        if self.features is None:
            return [f.name for f in schema.features]
        return list(self.features)


def _xavier(rng, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Model:
    """Owns the parameter tensors and the forward/loss computation.

    A model instance is single-threaded during a training step; read-only
    evaluation on disjoint batches may run concurrently.
    """

    def __init__(self, config, schema, catalog, seed=0, dtype=np.float64):
        self.config = config
        self.schema = schema
        self.catalog = catalog
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        h = config.hidden_size
        feats = config.active_features(schema)
        self.params = EF.init_embeddings(
            schema, catalog, h, config.max_len, rng,
            features=feats, use_position=config.use_position, dtype=dtype)

        n_fused = 1 + len(feats) + (1 if config.use_position else 0)
        self.n_fused = n_fused

        def linear(prefix, fan_in, fan_out, bias=True):
            self.params[prefix + ".w"] = Tensor(
                _xavier(rng, fan_in, fan_out, dtype), requires_grad=True)
            if bias:
                self.params[prefix + ".b"] = Tensor(
                    np.zeros(fan_out, dtype=dtype), requires_grad=True)

        for i in range(config.num_layers):
            p = f"layer{i}"
            for name in ("wq", "wk", "wv", "wo"):
                # the K bias is inert (softmax ignores per-row constant
                # shifts), so it is omitted
                linear(f"{p}.attn.{name}", h, h, bias=name != "wk")
            linear(f"{p}.ffn.w1", h, FFN_MULT * h)
            linear(f"{p}.ffn.w2", FFN_MULT * h, h)
            for ln in ("ln1", "ln2"):
                self.params[f"{p}.{ln}.g"] = Tensor(
                    np.ones(h, dtype=dtype), requires_grad=True)
                self.params[f"{p}.{ln}.b"] = Tensor(
                    np.zeros(h, dtype=dtype), requires_grad=True)
            if config.attention == "nova":
                self._add_fusion_params(f"{p}.fuse", n_fused, rng)
        if config.attention == "invasive":
            self._add_fusion_params("fuse", n_fused, rng)

        self.params["dec.bias"] = Tensor(
            np.zeros(catalog.m, dtype=dtype), requires_grad=True)

    def _add_fusion_params(self, prefix, k, rng):
        for name, t in EF.init_fusion_params(
                self.config.fusion, k, self.config.hidden_size, rng,
                dtype=self.dtype).items():
            self.params[f"{prefix}.{name}"] = t

    def _fusion_params(self, prefix):
        return {name.rsplit(".", 1)[1]: t for name, t in self.params.items()
                if name.startswith(prefix + ".")}

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    # -- forward -----------------------------------------------------------

    def _linear(self, x, prefix):
        out = T.matmul(x, self.params[prefix + ".w"])
        if prefix + ".b" in self.params:
            out = T.add(out, self.params[prefix + ".b"])
        return out

    def _split_heads(self, x):
        B, L, h = x.shape
        H, d = self.config.num_heads, self.config.d_k
        return T.transpose(T.reshape(x, (B, L, H, d)), (0, 2, 1, 3))

    def _merge_heads(self, x):
        B, H, L, d = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, H * d))

    def _attention_block(self, layer, qk_src, v_src, key_mask, train, rng):
        """Multi-head attention; Q and K read qk_src, V reads v_src."""
        p = f"layer{layer}.attn"
        q = self._split_heads(self._linear(qk_src, f"{p}.wq"))
        k = self._split_heads(self._linear(qk_src, f"{p}.wk"))
        v = self._split_heads(self._linear(v_src, f"{p}.wv"))
        out, attn = T.scaled_dot_attention(
            q, k, v, key_mask=key_mask,
            attn_dropout=self.config.dropout, rng=rng, train=train)
        out = self._linear(self._merge_heads(out), f"{p}.wo")
        out = T.dropout(out, self.config.dropout, rng, train)
        return out, attn

    def _ffn(self, x, layer):
        h = T.gelu(self._linear(x, f"layer{layer}.ffn.w1"))
        return self._linear(h, f"layer{layer}.ffn.w2")

    def _sublayers(self, layer, x, attn_out, train, rng):
        p = f"layer{layer}"
        x = T.layer_norm(T.add(x, attn_out),
                         self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
        f = T.dropout(self._ffn(x, layer), self.config.dropout, rng, train)
        return T.layer_norm(T.add(x, f),
                            self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])

    def invasive_layer(self, layer, x, key_mask, train=False, rng=None):
        attn_out, attn = self._attention_block(layer, x, x, key_mask, train, rng)
        return self._sublayers(layer, x, attn_out, train, rng), attn

    def nova_layer(self, layer, hidden, side, key_mask, train=False, rng=None):
        """Q, K from the freshly fused representation; V and the residual
        stay on the ID branch, so the output remains in ID space."""
        r, _ = EF.integrated_embeddings(
            None, self.params, self.schema, self.config.fusion,
            self._fusion_params(f"layer{layer}.fuse"), hidden=hidden,
            gating_mode=self.config.gating_mode, side=side)
        attn_out, attn = self._attention_block(layer, r, hidden, key_mask,
                                               train, rng)
        return self._sublayers(layer, hidden, attn_out, train, rng), attn

    def encode(self, batch, train=False, rng=None, collect_attn=False):
        """Run the full stack; returns (hidden [B,L,h], attn maps per layer)."""
        cfg = self.config
        if batch.items.shape[1] != cfg.max_len:
            raise ValueError(
                f"batch length {batch.items.shape[1]} != model max_len "
                f"{cfg.max_len}")
        key_mask = batch.pad_mask[:, None, None, :]
        feats = cfg.active_features(self.schema)
        side = EF.embed_side_features(batch, self.params, self.schema,
                                      features=feats,
                                      use_position=cfg.use_position)
        attns = []
        if cfg.attention == "invasive":
            r, _ = EF.integrated_embeddings(
                batch, self.params, self.schema, cfg.fusion,
                self._fusion_params("fuse"), features=feats,
                use_position=cfg.use_position, gating_mode=cfg.gating_mode,
                side=side)
            x = T.dropout(r, cfg.dropout, rng, train)
            for i in range(cfg.num_layers):
                x, attn = self.invasive_layer(i, x, key_mask, train, rng)
                if collect_attn:
                    attns.append(attn)
        else:
            hidden = T.embedding_lookup(self.params["emb.id"], batch.items)
            hidden = T.dropout(hidden, cfg.dropout, rng, train)
            # the identical side tensors are re-fed to every layer
            for i in range(cfg.num_layers):
                hidden, attn = self.nova_layer(i, hidden, side, key_mask,
                                               train, rng)
                if collect_attn:
                    attns.append(attn)
            x = hidden
        return x, attns

    def decode_scores(self, hidden):
        """Tied-embedding logits over items 1..m plus a per-item bias."""
        m = self.catalog.m
        rows = T.embedding_lookup(self.params["emb.id"], np.arange(1, m + 1))
        return T.add(T.matmul(hidden, T.transpose(rows, (1, 0))),
                     self.params["dec.bias"])

    def masked_loss(self, logits, labels):
        """Mean full-vocabulary cross-entropy over the masked positions."""
        m = self.catalog.m
        flat = T.reshape(logits, (-1, m))
        return T.cross_entropy_masked(flat, labels.reshape(-1))

    def loss(self, batch, train=False, rng=None):
        hidden, _ = self.encode(batch, train=train, rng=rng)
        return self.masked_loss(self.decode_scores(hidden), batch.labels)

    def first_layer_values(self, batch):
        """Layer-1 value-path input V*W_V (the ID-branch purity probe)."""
        if self.config.attention != "nova":
            raise ValueError("value probe is defined for NOVA mode")
        hidden = T.embedding_lookup(self.params["emb.id"], batch.items)
        return self._linear(hidden, "layer0.attn.wv")
