"""The patch-transformer autoencoder.

Frames are cut into space-time patches, one token per patch, grouped into
fixed-size blocks.  The encoder sees the patches plus a learned "masked"
embedding on positions that will be dropped; its output is squeezed through a
bottleneck (finite-scalar quantizer or a diagonal-Gaussian variational head),
multiplied by the keep mask, and decoded back to patches.  Attention is full
inside a block and causal across blocks, so a KV cache makes streaming
encoding of long clips equivalent to one monolithic forward pass.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CacheError, ConfigError, ShapeError
from .layers import KVCache, TransformerStack, block_causal_bias, linear, truncated_normal
from .tensor import Tensor, layer_norm

BOTTLENECK_KINDS = ("fsq", "vae")


@dataclass(frozen=True)
class ModelConfig:
    frame_height: int = 64
    frame_width: int = 64
    channels: int = 3
    patch_t: int = 1
    patch_h: int = 8
    patch_w: int = 8
    frames_per_block: int = 4
    min_tokens: int = 16
    hidden_size: int = 256
    ffn_size: int = 512
    num_heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 4
    rope_theta: float = 5e7
    bottleneck: str = "fsq"
    fsq_levels: tuple = (8, 8, 8, 5, 5, 5)
    latent_dim: int = 8
    kl_weight: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "fsq_levels", tuple(self.fsq_levels))
        if self.bottleneck not in BOTTLENECK_KINDS:
            raise ConfigError(f"unknown bottleneck kind '{self.bottleneck}'")
        if self.frames_per_block % self.patch_t:
            raise ConfigError("frames_per_block must be a multiple of the temporal patch extent")
        if self.frame_height % self.patch_h or self.frame_width % self.patch_w:
            raise ConfigError("frame extents must be divisible by the patch extents")
        if self.bottleneck == "fsq" and not self.fsq_levels:
            raise ConfigError("fsq bottleneck needs a nonempty level list")
        if self.bottleneck == "vae" and self.fsq_levels:
            raise ConfigError("vae bottleneck must not carry FSQ levels")
        if not 1 <= self.min_tokens <= self.tokens_per_block:
            raise ConfigError(
                f"min_tokens {self.min_tokens} outside [1, {self.tokens_per_block}]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype '{self.dtype}'")

    @property
    def tokens_per_block(self) -> int:
        return (self.frames_per_block // self.patch_t) \
            * (self.frame_height // self.patch_h) \
            * (self.frame_width // self.patch_w)

    @property
    def max_tokens(self) -> int:
        return self.tokens_per_block

    @property
    def patch_dim(self) -> int:
        return self.patch_t * self.patch_h * self.patch_w * self.channels

    @property
    def token_dim(self) -> int:
        """Width of one latent token as the decoder sees it."""
        return len(self.fsq_levels) if self.bottleneck == "fsq" else self.latent_dim

    @property
    def encoder_out_dim(self) -> int:
        return len(self.fsq_levels) if self.bottleneck == "fsq" else 2 * self.latent_dim

    @property
    def codebook_size(self) -> int:
        return math.prod(self.fsq_levels) if self.fsq_levels else 0

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if k == "fsq_levels" else v for k, v in d.items()})

    def digest(self) -> str:
        """Hash of the canonicalized config; guards streams and checkpoints."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


# -- patch rearrangement -------------------------------------------------------


def patchify_rearrange(clip: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(frames, H, W, C) pixels -> (blocks, tokens_per_block, patch_dim).

    Token order inside a block is raster: temporal patch, then patch row,
    then patch column.  Exactly inverted by `unpatchify`.
    """
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ShapeError(f"clip must be (frames, H, W, C), got {clip.shape}")
    frames, H, W, C = clip.shape
    if H != cfg.frame_height or W != cfg.frame_width or C != cfg.channels:
        raise ShapeError(
            f"clip extents {(H, W, C)} do not match config "
            f"{(cfg.frame_height, cfg.frame_width, cfg.channels)}")
    if frames % cfg.frames_per_block:
        raise ShapeError(f"{frames} frames is not a multiple of a {cfg.frames_per_block}-frame block")
    nb = frames // cfg.frames_per_block
    nt = cfg.frames_per_block // cfg.patch_t
    nh = H // cfg.patch_h
    nw = W // cfg.patch_w
    x = clip.reshape(nb, nt, cfg.patch_t, nh, cfg.patch_h, nw, cfg.patch_w, C)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)  # (nb, nt, nh, nw, pt, ph, pw, C)
    return np.ascontiguousarray(x.reshape(nb, nt * nh * nw, cfg.patch_dim))


def unpatchify(patches: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Inverse of `patchify_rearrange`, bit-exact."""
    patches = np.asarray(patches)
    nb = patches.shape[0]
    if patches.shape[1:] != (cfg.tokens_per_block, cfg.patch_dim):
        raise ShapeError(
            f"patches shape {patches.shape} does not match "
            f"(blocks, {cfg.tokens_per_block}, {cfg.patch_dim})")
    nt = cfg.frames_per_block // cfg.patch_t
    nh = cfg.frame_height // cfg.patch_h
    nw = cfg.frame_width // cfg.patch_w
    x = patches.reshape(nb, nt, nh, nw, cfg.patch_t, cfg.patch_h, cfg.patch_w, cfg.channels)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7)  # (nb, nt, pt, nh, ph, nw, pw, C)
    return np.ascontiguousarray(
        x.reshape(nb * cfg.frames_per_block, cfg.frame_height, cfg.frame_width, cfg.channels))


def apply_mask(z: Tensor | np.ndarray, mask: np.ndarray, null_code: int | None = None):
    """Zero out (continuous) or null out (discrete codes) dropped positions.

    `z`: (..., tokens, dim) latents, or an integer (..., tokens) code array
    when `null_code` is given.  `mask`: (..., tokens) zeros/ones.
    """
    if null_code is not None and not isinstance(z, Tensor) and np.issubdtype(np.asarray(z).dtype, np.integer):
        out = np.asarray(z).copy()
        out[np.asarray(mask) == 0] = null_code
        return out
    m = np.asarray(mask)[..., None]
    if isinstance(z, Tensor):
        return z * m.astype(z.dtype)
    return z * m.astype(z.dtype)


class Autoencoder:
    """Encoder/decoder pair with a prefix-maskable token bottleneck."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.encoder = TransformerStack(
            "enc", cfg.encoder_layers, cfg.hidden_size, cfg.num_heads, cfg.ffn_size, cfg.rope_theta)
        self.decoder = TransformerStack(
            "dec", cfg.decoder_layers, cfg.hidden_size, cfg.num_heads, cfg.ffn_size, cfg.rope_theta)

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 0) -> "Autoencoder":
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        params: dict[str, Tensor] = {}
        model = cls(cfg, params)

        def proj(name, shape):
            params[name] = Tensor(truncated_normal(rng, shape, 0.02, dt), requires_grad=True, name=name)

        def zeros(name, shape):
            params[name] = Tensor(np.zeros(shape, dtype=dt), requires_grad=True, name=name)

        def ones(name, shape):
            params[name] = Tensor(np.ones(shape, dtype=dt), requires_grad=True, name=name)

        proj("enc.in.w", (cfg.patch_dim, cfg.hidden_size))
        zeros("enc.in.b", cfg.hidden_size)
        proj("enc.mask_embed", (cfg.hidden_size,))
        model.encoder.init_params(params, rng, dt)
        ones("enc.ln_f.g", cfg.hidden_size)
        zeros("enc.ln_f.b", cfg.hidden_size)
        proj("enc.head.w", (cfg.hidden_size, cfg.encoder_out_dim))
        zeros("enc.head.b", cfg.encoder_out_dim)

        proj("dec.in.w", (cfg.token_dim, cfg.hidden_size))
        zeros("dec.in.b", cfg.hidden_size)
        if cfg.bottleneck == "fsq":
            proj("dec.null_embed", (cfg.hidden_size,))
        model.decoder.init_params(params, rng, dt)
        ones("dec.ln_f.g", cfg.hidden_size)
        zeros("dec.ln_f.b", cfg.hidden_size)
        proj("dec.head.w", (cfg.hidden_size, cfg.patch_dim))
        zeros("dec.head.b", cfg.patch_dim)
        return model

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward passes -----------------------------------------------------

    def _check_tokens(self, n_tokens: int, cache: KVCache | None):
        B = self.cfg.tokens_per_block
        if n_tokens % B:
            raise ShapeError(f"{n_tokens} tokens is not whole blocks of {B}")
        if cache is not None and cache.tokens_per_block != B:
            raise CacheError(f"cache block size {cache.tokens_per_block} != model {B}")

    def encode(
        self,
        patches,
        mask: np.ndarray,
        cache: KVCache | None = None,
        *,
        collect_kv: bool = False,
        return_hidden: bool = False,
    ):
        """Patch tokens + keep mask -> pre-bottleneck latent parameters.

        `patches`: (batch, n_tokens, patch_dim); `mask`: (batch, n_tokens) or
        (n_tokens,) zeros/ones.  Positions with mask 0 receive the learned
        "masked" embedding on top of their patch projection.  Returns the
        encoder head output (batch, n_tokens, encoder_out_dim); with
        `return_hidden`, also the (batch, n_tokens, hidden) trunk states; with
        `collect_kv`, also this call's per-layer (k, v) for cache appends.
        """
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=self.cfg.np_dtype))
        if x.ndim != 3 or x.shape[-1] != self.cfg.patch_dim:
            raise ShapeError(f"patches must be (batch, tokens, {self.cfg.patch_dim}), got {x.shape}")
        self._check_tokens(x.shape[1], cache)
        mask = np.broadcast_to(np.asarray(mask, dtype=self.cfg.np_dtype), x.shape[:2])

        h = linear(self.params, "enc.in", x)
        h = h + Tensor((1.0 - mask)[..., None]) * self.params["enc.mask_embed"]
        n_ctx = cache.tokens if cache is not None else 0
        bias = block_causal_bias(x.shape[1], n_ctx, self.cfg.tokens_per_block, self.cfg.np_dtype)
        h, new_kv = self.encoder.forward(self.params, h, bias=bias, cache=cache, collect_kv=collect_kv)
        h = layer_norm(h, self.params["enc.ln_f.g"], self.params["enc.ln_f.b"])
        lat = linear(self.params, "enc.head", h)
        out = [lat]
        if return_hidden:
            out.append(h)
        if collect_kv:
            out.append(new_kv)
        return out[0] if len(out) == 1 else tuple(out)

    def decode(
        self,
        z_m,
        mask: np.ndarray | None = None,
        cache: KVCache | None = None,
        *,
        collect_kv: bool = False,
    ):
        """Masked latents -> patch reconstruction (batch, n_tokens, patch_dim).

        `z_m` is (batch, n_tokens, token_dim) with dropped positions already
        zeroed.  For the discrete bottleneck the decoder swaps dropped
        positions for its learned null embedding, so `mask` must be given
        whenever any position is dropped.
        """
        z = z_m if isinstance(z_m, Tensor) else Tensor(np.asarray(z_m, dtype=self.cfg.np_dtype))
        if z.ndim != 3 or z.shape[-1] != self.cfg.token_dim:
            raise ShapeError(f"latents must be (batch, tokens, {self.cfg.token_dim}), got {z.shape}")
        self._check_tokens(z.shape[1], cache)
        h = linear(self.params, "dec.in", z)
        if self.cfg.bottleneck == "fsq":
            if mask is None:
                m = np.ones(z.shape[:2], dtype=self.cfg.np_dtype)
            else:
                m = np.broadcast_to(np.asarray(mask, dtype=self.cfg.np_dtype), z.shape[:2])
            mt = Tensor(m[..., None])
            h = h * mt + Tensor((1.0 - m)[..., None]) * self.params["dec.null_embed"]
        n_ctx = cache.tokens if cache is not None else 0
        bias = block_causal_bias(z.shape[1], n_ctx, self.cfg.tokens_per_block, self.cfg.np_dtype)
        h, new_kv = self.decoder.forward(self.params, h, bias=bias, cache=cache, collect_kv=collect_kv)
        h = layer_norm(h, self.params["dec.ln_f.g"], self.params["dec.ln_f.b"])
        recon = linear(self.params, "dec.head", h)
        return (recon, new_kv) if collect_kv else recon

    def new_cache(self, which: str) -> KVCache:
        layers = self.cfg.encoder_layers if which == "enc" else self.cfg.decoder_layers
        return KVCache(layers, self.cfg.tokens_per_block)
