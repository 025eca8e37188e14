"""Toy latent-diffusion networks: VAE compressor, text-conditioned U-Net.

The VAE maps 3xHxW images (values in [-1,1]) to a 4-channel latent at H/4 by
W/4 and back through a tanh-bounded decoder. The U-Net denoises latents at
two resolutions (8x8 and 4x4 for the default 32x32 images) with a
cross-attention block plus feed-forward at each resolution; timesteps enter
as sinusoidal embeddings projected into per-block channel biases.

All forwards accept a single sample (C,H,W) or a batch (N,C,H,W). Batched
attention pads every prompt to a fixed token count and masks the padding
keys to -inf, so heterogeneous prompts run as one matmul with per-sample
semantics intact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .rng import Stream
from .textenc import TextEmbedding, TEXT_DIM
from . import tensor as T

LATENT_CHANNELS = 4
REDUCTION = 4
GN_GROUPS = 4
TIME_DIM = 32


def _conv_init(stream: Stream, c_out: int, c_in: int, k: int) -> T.Tensor:
    std = 1.0 / np.sqrt(c_in * k * k)
    return T.Tensor(stream.normal((c_out, c_in, k, k)) * std, requires_grad=True)


def _linear_init(stream: Stream, d_out: int, d_in: int) -> T.Tensor:
    return T.Tensor(stream.normal((d_out, d_in)) / np.sqrt(d_in), requires_grad=True)


def _zeros(*shape) -> T.Tensor:
    return T.Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> T.Tensor:
    return T.Tensor(np.ones(shape), requires_grad=True)


def time_table(T_steps: int, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal timestep embeddings for t = 0..T."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    t = np.arange(T_steps + 1)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(t), np.cos(t)], axis=1)


# ------------------------------------------------------------------- the VAE


@dataclass
class VaeParams:
    width: int
    params: dict[str, T.Tensor]
    latent_channels: int = LATENT_CHANNELS
    reduction: int = REDUCTION

    def trainable(self) -> list[T.Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def state(self) -> dict[str, np.ndarray]:
        return {f"vae.{k}": v.data for k, v in self.params.items()}


def init_vae(seed: int, width: int = 16) -> VaeParams:
    s = Stream(seed, "vae-init")
    w, cz = width, LATENT_CHANNELS
    p = {
        "enc1.w": _conv_init(s, w, 3, 3), "enc1.b": _zeros(w),
        "enc2.w": _conv_init(s, 2 * w, w, 3), "enc2.b": _zeros(2 * w),
        "enc2.gn.g": _ones(2 * w), "enc2.gn.b": _zeros(2 * w),
        "enc3.w": _conv_init(s, 2 * w, 2 * w, 3), "enc3.b": _zeros(2 * w),
        "enc3.gn.g": _ones(2 * w), "enc3.gn.b": _zeros(2 * w),
        "enc4.w": _conv_init(s, 2 * cz, 2 * w, 1), "enc4.b": _zeros(2 * cz),
        "dec1.w": _conv_init(s, 2 * w, cz, 1), "dec1.b": _zeros(2 * w),
        "dec2.w": _conv_init(s, 2 * w, 2 * w, 3), "dec2.b": _zeros(2 * w),
        "dec2.gn.g": _ones(2 * w), "dec2.gn.b": _zeros(2 * w),
        "dec3.w": _conv_init(s, w, 2 * w, 3), "dec3.b": _zeros(w),
        "dec3.gn.g": _ones(w), "dec3.gn.b": _zeros(w),
        "dec4.w": _conv_init(s, 3, w, 3), "dec4.b": _zeros(3),
    }
    return VaeParams(width=width, params=p)


def _conv_block(x, p, name, stride=1, padding=1):
    h = T.conv2d(x, p[f"{name}.w"], stride=stride, padding=padding)
    return T.add_channel_bias(h, p[f"{name}.b"])


def vae_encode(x, vae: VaeParams, rng: Stream | None = None):
    """Returns (mean, logvar, z); z is reparameterized when rng is given,
    otherwise z == mean."""
    xt = x if isinstance(x, T.Tensor) else T.Tensor(x)
    h, w = xt.shape[-2], xt.shape[-1]
    if h % vae.reduction or w % vae.reduction:
        raise DimensionError(f"image extents {h}x{w} not divisible by {vae.reduction}")
    p = vae.params
    h1 = T.silu(_conv_block(xt, p, "enc1"))
    h2 = _conv_block(T.decimate2(h1), p, "enc2")
    h2 = T.silu(T.group_norm(h2, GN_GROUPS, p["enc2.gn.g"], p["enc2.gn.b"]))
    h3 = _conv_block(T.decimate2(h2), p, "enc3")
    h3 = T.silu(T.group_norm(h3, GN_GROUPS, p["enc3.gn.g"], p["enc3.gn.b"]))
    h4 = _conv_block(h3, p, "enc4", padding=0)
    cz = vae.latent_channels
    mean = T.slice_channels(h4, 0, cz)
    logvar = T.slice_channels(h4, cz, 2 * cz)
    if rng is None:
        return mean, logvar, mean
    xi = rng.normal(mean.shape)
    z = T.add(mean, T.mul(T.exp(T.scale(logvar, 0.5)), T.Tensor(xi)))
    return mean, logvar, z


def vae_decode(z, vae: VaeParams) -> T.Tensor:
    zt = z if isinstance(z, T.Tensor) else T.Tensor(z)
    if zt.shape[-3] != vae.latent_channels:
        raise DimensionError(f"latent channels {zt.shape[-3]} != {vae.latent_channels}")
    p = vae.params
    h = T.silu(_conv_block(zt, p, "dec1", padding=0))
    h = _conv_block(h, p, "dec2")
    h = T.silu(T.group_norm(h, GN_GROUPS, p["dec2.gn.g"], p["dec2.gn.b"]))
    h = _conv_block(T.upsample_nearest(h, 2), p, "dec3")
    h = T.silu(T.group_norm(h, GN_GROUPS, p["dec3.gn.g"], p["dec3.gn.b"]))
    return T.tanh(_conv_block(T.upsample_nearest(h, 2), p, "dec4"))


def vae_loss(x, mean, logvar, xhat, kl_weight: float) -> T.Tensor:
    """Reconstruction MSE plus kl_weight * KL(q(z|x) || N(0,I)), per element."""
    xt = x if isinstance(x, T.Tensor) else T.Tensor(x)
    rec = T.mse(xhat, xt)
    term = T.sub(T.shift(T.add(T.exp(logvar), T.mul(mean, mean)), -1.0), logvar)
    kl = T.scale(T.tsum(term), 0.5 / mean.numel)
    return T.add(rec, T.scale(kl, kl_weight))


# ------------------------------------------------------- cross-attention block


def cross_attention(visual: T.Tensor, text: TextEmbedding, weights: dict[str, T.Tensor]) -> T.Tensor:
    """softmax(Q K^T / sqrt(d)) V with residual, then feed-forward with its
    own residual. Q projects the (N, D_v) visual rows; K, V project the text
    tokens. Projections are bias-free so a null (all-zero) prompt contributes
    nothing beyond the residual path."""
    wq, wk, wv = weights["wq"], weights["wk"], weights["wv"]
    d = wq.shape[0]
    q = T.matmul(visual, T.transpose2d(wq))
    k = T.matmul(text.tokens, T.transpose2d(wk))
    v = T.matmul(text.tokens, T.transpose2d(wv))
    logits = T.scale(T.matmul(q, T.transpose2d(k)), 1.0 / np.sqrt(d))
    attn = T.softmax(logits, axis=1)
    h = T.add(visual, T.matmul(attn, v))
    ff = T.add_row_bias(T.matmul(h, T.transpose2d(weights["ff1.w"])), weights["ff1.b"])
    ff = T.add_row_bias(T.matmul(T.silu(ff), T.transpose2d(weights["ff2.w"])), weights["ff2.b"])
    return T.add(h, ff)


# ------------------------------------------------------------------ the U-Net


@dataclass
class UnetParams:
    width: int
    T_steps: int
    params: dict[str, T.Tensor]
    d_txt: int = TEXT_DIM
    latent_channels: int = LATENT_CHANNELS
    time: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.time.size == 0:
            self.time = time_table(self.T_steps)

    def trainable(self) -> list[T.Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def state(self) -> dict[str, np.ndarray]:
        return {f"unet.{k}": v.data for k, v in self.params.items()}

    def attention_targets(self) -> list[str]:
        names = []
        for blk in ("attn1", "attn2", "attn3"):
            names += [f"{blk}.wq", f"{blk}.wk", f"{blk}.wv", f"{blk}.ff1.w", f"{blk}.ff2.w"]
        return names


def _res_params(s: Stream, name: str, c: int) -> dict[str, T.Tensor]:
    return {
        f"{name}.gn_a.g": _ones(c), f"{name}.gn_a.b": _zeros(c),
        f"{name}.conv_a.w": _conv_init(s, c, c, 3), f"{name}.conv_a.b": _zeros(c),
        f"{name}.temb.w": _linear_init(s, c, TIME_DIM), f"{name}.temb.b": _zeros(c),
        f"{name}.gn_b.g": _ones(c), f"{name}.gn_b.b": _zeros(c),
        f"{name}.conv_b.w": _conv_init(s, c, c, 3), f"{name}.conv_b.b": _zeros(c),
    }


def _attn_params(s: Stream, name: str, c: int, d_txt: int) -> dict[str, T.Tensor]:
    d = c // 2
    return {
        f"{name}.wq": _linear_init(s, d, c),
        f"{name}.wk": _linear_init(s, d, d_txt),
        f"{name}.wv": _linear_init(s, c, d_txt),
        f"{name}.ff1.w": _linear_init(s, 4 * c, c), f"{name}.ff1.b": _zeros(4 * c),
        f"{name}.ff2.w": _linear_init(s, c, 4 * c), f"{name}.ff2.b": _zeros(c),
    }


def init_unet(seed: int, T_steps: int, width: int = 32, d_txt: int = TEXT_DIM) -> UnetParams:
    s = Stream(seed, "unet-init")
    u, cz = width, LATENT_CHANNELS
    p: dict[str, T.Tensor] = {
        "conv_in.w": _conv_init(s, u, cz, 3), "conv_in.b": _zeros(u),
        "down.w": _conv_init(s, 2 * u, u, 3), "down.b": _zeros(2 * u),
        "fuse.w": _conv_init(s, u, 3 * u, 3), "fuse.b": _zeros(u),
        "out_gn.g": _ones(u), "out_gn.b": _zeros(u),
        # near-zero head: starts close to the identity denoiser but keeps
        # gradients and prompt sensitivity alive
        "out.w": T.Tensor(s.normal((cz, u, 3, 3)) * (0.01 / np.sqrt(u * 9)),
                          requires_grad=True),
        "out.b": _zeros(cz),
    }
    p.update(_res_params(s, "res1", u))
    p.update(_attn_params(s, "attn1", u, d_txt))
    p.update(_res_params(s, "res2", 2 * u))
    p.update(_attn_params(s, "attn2", 2 * u, d_txt))
    p.update(_res_params(s, "res3", u))
    p.update(_attn_params(s, "attn3", u, d_txt))
    return UnetParams(width=width, T_steps=T_steps, params=p, d_txt=d_txt)


def _eff_weights(unet: UnetParams, adapters) -> dict[str, T.Tensor]:
    """Resolve attention/ff weights, folding in enabled low-rank updates."""
    eff: dict[str, T.Tensor] = {}
    for name in unet.attention_targets():
        w = unet.params[name]
        if adapters and name in adapters and adapters[name].enabled:
            a = adapters[name]
            delta = T.scale(T.matmul(a.B, a.A), a.alpha / a.rank)
            w = T.add(w, delta)
        eff[name] = w
    return eff


def _res_forward(x, p, name, temb_rows):
    h = T.silu(T.group_norm(x, GN_GROUPS, p[f"{name}.gn_a.g"], p[f"{name}.gn_a.b"]))
    h = _conv_block(h, p, f"{name}.conv_a")
    proj = T.add_row_bias(T.matmul(temb_rows, T.transpose2d(p[f"{name}.temb.w"])),
                          p[f"{name}.temb.b"])
    h = T.add_channel_bias(h, proj)
    h = T.silu(T.group_norm(h, GN_GROUPS, p[f"{name}.gn_b.g"], p[f"{name}.gn_b.b"]))
    h = _conv_block(h, p, f"{name}.conv_b")
    return T.add(x, h)


def _attn_forward(x, btext: "BatchedText", blk: str, eff, p) -> T.Tensor:
    """Masked batched attention over padded text tokens; exact per-sample
    semantics (padding keys get -inf logits, hence weight 0)."""
    b, c, h, w = x.shape
    n = h * w
    lm = btext.tokens.shape[1]
    d = eff[f"{blk}.wq"].shape[0]
    frames = T.reshape(T.permute(x, (0, 2, 3, 1)), (b * n, c))
    q = T.reshape(T.matmul(frames, T.transpose2d(eff[f"{blk}.wq"])), (b, n, d))
    toks = T.reshape(btext.tokens, (b * lm, btext.tokens.shape[2]))
    k = T.reshape(T.matmul(toks, T.transpose2d(eff[f"{blk}.wk"])), (b, lm, d))
    v = T.reshape(T.matmul(toks, T.transpose2d(eff[f"{blk}.wv"])), (b, lm, c))
    logits = T.scale(T.bmm(q, T.permute(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    logits = T.add(logits, T.Tensor(np.broadcast_to(btext.mask_bias[:, None, :], (b, n, lm)).copy()))
    attn = T.softmax(logits, axis=2)
    hres = T.add(T.reshape(frames, (b, n, c)), T.bmm(attn, v))
    hflat = T.reshape(hres, (b * n, c))
    ff = T.add_row_bias(T.matmul(hflat, T.transpose2d(eff[f"{blk}.ff1.w"])), p[f"{blk}.ff1.b"])
    ff = T.add_row_bias(T.matmul(T.silu(ff), T.transpose2d(eff[f"{blk}.ff2.w"])), p[f"{blk}.ff2.b"])
    y = T.add(hflat, ff)
    return T.permute(T.reshape(y, (b, h, w, c)), (0, 3, 1, 2))


@dataclass
class BatchedText:
    tokens: T.Tensor        # (B, MAX_TOKENS, d_txt)
    mask_bias: np.ndarray   # (B, MAX_TOKENS); 0 where valid, -inf-ish on padding


def _batch_texts(texts: list[TextEmbedding]) -> BatchedText:
    tokens = T.stack0([t.padded for t in texts])
    bias = np.zeros((len(texts), tokens.shape[1]))
    for i, t in enumerate(texts):
        bias[i, t.length:] = -1e30
    return BatchedText(tokens=tokens, mask_bias=bias)


def unet_forward_batch(z_t, ts: list[int], texts: list[TextEmbedding],
                       unet: UnetParams, adapters=None) -> T.Tensor:
    zt = z_t if isinstance(z_t, T.Tensor) else T.Tensor(z_t)
    if zt.data.ndim != 4:
        raise DimensionError("unet_forward_batch expects (N,C,H,W)")
    for t in ts:
        if not 1 <= t <= unet.T_steps:
            raise ContractError(f"t={t} outside 1..{unet.T_steps}")
    if not (len(ts) == zt.shape[0] == len(texts)):
        raise ContractError("batch extents of z_t, ts, texts disagree")
    p = unet.params
    eff = _eff_weights(unet, adapters)
    btext = _batch_texts(texts)
    temb = T.Tensor(unet.time[np.asarray(ts)])
    h1 = _conv_block(zt, p, "conv_in")
    h1 = _res_forward(h1, p, "res1", temb)
    h1 = _attn_forward(h1, btext, "attn1", eff, p)
    h2 = _conv_block(T.decimate2(h1), p, "down")
    h2 = _res_forward(h2, p, "res2", temb)
    h2 = _attn_forward(h2, btext, "attn2", eff, p)
    u = T.upsample_nearest(h2, 2)
    u = _conv_block(T.concat_channels(u, h1), p, "fuse")
    u = _res_forward(u, p, "res3", temb)
    u = _attn_forward(u, btext, "attn3", eff, p)
    u = T.silu(T.group_norm(u, GN_GROUPS, p["out_gn.g"], p["out_gn.b"]))
    return _conv_block(u, p, "out")


def unet_forward(z_t, t: int, text: TextEmbedding, unet: UnetParams, adapters=None) -> T.Tensor:
    """Single-sample noise prediction; output shape equals input shape."""
    zt = z_t if isinstance(z_t, T.Tensor) else T.Tensor(z_t)
    if zt.data.ndim != 3:
        raise DimensionError("unet_forward expects (C,H,W)")
    batched = T.reshape(zt, (1,) + zt.shape)
    out = unet_forward_batch(batched, [t], [text], unet, adapters)
    return T.select0(out, 0)
