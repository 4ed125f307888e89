"""Transformer building blocks over the autodiff substrate.

Attention is bidirectional inside a token block and causal across blocks.
Positions enter through rotary embeddings on queries and keys, with absolute
token indices so cached (streaming) and monolithic execution agree.
"""

from __future__ import annotations

import numpy as np

from .errors import CacheError, ConfigError
from .tensor import Tensor, concat, gelu, layer_norm, matmul, rotate_half, softmax

NEG_BIAS = -1e9


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with draws beyond two deviations resampled."""
    out = rng.standard_normal(shape) * std
    for _ in range(8):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum())) * std
    return np.clip(out, -2 * std, 2 * std).astype(dtype)


def rope_tables(positions: np.ndarray, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), head_dim), rotate-half pairing."""
    if head_dim % 2:
        raise ConfigError(f"rotary needs an even head dim, got {head_dim}")
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)
    return cos.astype(dtype), sin.astype(dtype)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    # x: (batch, heads, seq, head_dim); tables broadcast over batch and heads
    return x * cos + rotate_half(x) * sin


def block_causal_bias(n_new: int, n_ctx: int, tokens_per_block: int, dtype) -> np.ndarray | None:
    """Additive attention bias for `n_new` query tokens after `n_ctx` cached ones.

    Keys cover the cached tokens followed by the new ones.  Returns None when
    every position may attend everywhere (single block, or pure cache append),
    so callers can skip the add.
    """
    B = tokens_per_block
    if (n_ctx + n_new - 1) // B == n_ctx // B:
        # all new tokens share one block: cached blocks and the own block are
        # fully visible, so the bias would be all zeros
        return None
    q_block = (n_ctx + np.arange(n_new)) // B
    k_block = np.arange(n_ctx + n_new) // B
    allowed = k_block[None, :] <= q_block[:, None]
    bias = np.where(allowed, 0.0, NEG_BIAS)
    return bias.astype(dtype)


class KVCache:
    """Per-layer attention keys/values for completed blocks, append-only."""

    def __init__(self, n_layers: int, tokens_per_block: int):
        self.n_layers = n_layers
        self.tokens_per_block = tokens_per_block
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers
        self.blocks = 0

    @property
    def tokens(self) -> int:
        return self.blocks * self.tokens_per_block

    def append(self, layer_kv: list[tuple[np.ndarray, np.ndarray]]) -> None:
        if len(layer_kv) != self.n_layers:
            raise CacheError(f"cache has {self.n_layers} layers, got {len(layer_kv)} updates")
        n_tok = layer_kv[0][0].shape[2]
        if n_tok % self.tokens_per_block:
            raise CacheError(f"cache appends whole blocks; got {n_tok} tokens")
        for i, (k, v) in enumerate(layer_kv):
            if self.keys[i] is None:
                self.keys[i] = k
                self.values[i] = v
            else:
                self.keys[i] = np.concatenate([self.keys[i], k], axis=2)
                self.values[i] = np.concatenate([self.values[i], v], axis=2)
        self.blocks += n_tok // self.tokens_per_block


def linear(params: dict, prefix: str, x: Tensor) -> Tensor:
    """x @ W + b where x is (..., in_dim), via one flat GEMM."""
    w = params[f"{prefix}.w"]
    b = params[f"{prefix}.b"]
    lead = x.shape[:-1]
    flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(flat, w) + b
    return y.reshape(lead + (w.shape[1],)) if x.ndim != 2 else y


class TransformerStack:
    """A pre-norm encoder/decoder trunk operating on a shared parameter dict.

    Parameter names are `{prefix}.{i}.<leaf>`; creation and forward stay in
    one place so checkpoints remain plain name->array maps.
    """

    def __init__(self, prefix: str, n_layers: int, hidden: int, heads: int, ffn: int, theta: float):
        if hidden % heads:
            raise ConfigError(f"hidden size {hidden} not divisible by {heads} heads")
        self.prefix = prefix
        self.n_layers = n_layers
        self.hidden = hidden
        self.heads = heads
        self.head_dim = hidden // heads
        self.ffn = ffn
        self.theta = theta

    def init_params(self, params: dict, rng: np.random.Generator, dtype) -> None:
        h, f = self.hidden, self.ffn
        for i in range(self.n_layers):
            p = f"{self.prefix}.{i}"
            for leaf, shape in (
                (f"{p}.attn.wq", (h, h)),
                (f"{p}.attn.wk", (h, h)),
                (f"{p}.attn.wv", (h, h)),
                (f"{p}.attn.wo", (h, h)),
                (f"{p}.mlp.w1", (h, f)),
                (f"{p}.mlp.w2", (f, h)),
            ):
                params[leaf] = Tensor(truncated_normal(rng, shape, 0.02, dtype), requires_grad=True, name=leaf)
            for leaf, dim in ((f"{p}.attn.bq", h), (f"{p}.attn.bk", h), (f"{p}.attn.bv", h),
                              (f"{p}.attn.bo", h), (f"{p}.mlp.b1", f), (f"{p}.mlp.b2", h)):
                params[leaf] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True, name=leaf)
            for leaf, fill in ((f"{p}.ln1.g", 1.0), (f"{p}.ln1.b", 0.0), (f"{p}.ln2.g", 1.0), (f"{p}.ln2.b", 0.0)):
                params[leaf] = Tensor(np.full(h, fill, dtype=dtype), requires_grad=True, name=leaf)

    def _proj_heads(self, params, layer: str, which: str, x: Tensor, batch: int, seq: int) -> Tensor:
        w = params[f"{layer}.attn.w{which}"]
        b = params[f"{layer}.attn.b{which}"]
        y = matmul(x.reshape((-1, self.hidden)), w) + b
        return y.reshape((batch, seq, self.heads, self.head_dim)).transpose(0, 2, 1, 3)

    def forward(
        self,
        params: dict,
        x: Tensor,
        *,
        pos_offset: int = 0,
        bias: np.ndarray | None = None,
        cache: KVCache | None = None,
        collect_kv: bool = False,
    ):
        """Run the stack on (batch, seq, hidden) tokens.

        `cache` supplies keys/values for all earlier blocks; new tokens then
        attend to cache plus themselves (`bias` must already encode any
        block-causal structure among the new tokens).  Returns (y, new_kv)
        where new_kv is a per-layer list of this call's (k, v) when
        `collect_kv`, else None.
        """
        batch, seq = x.shape[0], x.shape[1]
        if cache is not None:
            if cache.n_layers != self.n_layers:
                raise CacheError(f"cache built for {cache.n_layers} layers, stack has {self.n_layers}")
            if cache.blocks and cache.keys[0].shape[1] != self.heads:
                raise CacheError("cache head count does not match the model")
            pos_offset = pos_offset + cache.tokens
        positions = pos_offset + np.arange(seq)
        cos, sin = rope_tables(positions, self.head_dim, self.theta, x.dtype)
        scale = 1.0 / np.sqrt(self.head_dim)
        new_kv = [] if collect_kv else None

        h = x
        for i in range(self.n_layers):
            p = f"{self.prefix}.{i}"
            n = layer_norm(h, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
            q = self._proj_heads(params, p, "q", n, batch, seq)
            k = self._proj_heads(params, p, "k", n, batch, seq)
            v = self._proj_heads(params, p, "v", n, batch, seq)
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)
            if collect_kv:
                new_kv.append((k.data, v.data))
            if cache is not None and cache.blocks:
                ck = np.broadcast_to(cache.keys[i], (batch,) + cache.keys[i].shape[1:])
                cv = np.broadcast_to(cache.values[i], (batch,) + cache.values[i].shape[1:])
                k_full = concat([Tensor(ck), k], axis=2)
                v_full = concat([Tensor(cv), v], axis=2)
            else:
                k_full, v_full = k, v
            scores = matmul(q, k_full.transpose(0, 1, 3, 2)) * scale
            if bias is not None:
                scores = scores + bias
            attn = softmax(scores, axis=-1)
            ctx = matmul(attn, v_full)
            ctx = ctx.transpose(0, 2, 1, 3).reshape((batch, seq, self.hidden))
            proj = matmul(ctx.reshape((-1, self.hidden)), params[f"{p}.attn.wo"]) + params[f"{p}.attn.bo"]
            h = h + proj.reshape((batch, seq, self.hidden))

            n2 = layer_norm(h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
            m1 = gelu(matmul(n2.reshape((-1, self.hidden)), params[f"{p}.mlp.w1"]) + params[f"{p}.mlp.b1"])
            m2 = matmul(m1, params[f"{p}.mlp.w2"]) + params[f"{p}.mlp.b2"]
            h = h + m2.reshape((batch, seq, self.hidden))
        return h, new_kv
