"""Unified transformer backbone over template and search tokens.

Language enters exactly once, through the modal mixup gate applied to both
vision streams before the encoder stack; the encoder itself consumes only the
concatenated [search; template] token sequence, so information still flows
both ways between the streams through self-attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError
from .numcore import Tensor, named_stream, truncated_normal


@dataclass
class LinearParams:
    """Weight (in, out) and bias (out,) for an affine map."""

    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        # Flatten leading axes into one matmul; small stacked GEMMs are slow.
        if x.ndim == 2:
            return x @ self.weight + self.bias
        lead = tuple(x.shape[:-1])
        flat = nc.reshape(x, (int(np.prod(lead)), x.shape[-1]))
        out = flat @ self.weight + self.bias
        return nc.reshape(out, lead + (self.weight.shape[1],))


def init_linear(rng, d_in, d_out, std=0.02) -> LinearParams:
    return LinearParams(
        weight=Tensor(truncated_normal(rng, (d_in, d_out), std=std), requires_grad=True),
        bias=Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True),
    )


@dataclass
class EncoderLayerParams:
    """Projections, feed-forward weights, and the two layernorm affine pairs."""

    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    ffn1: LinearParams
    ffn2: LinearParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


def init_encoder_layer(rng, dim: int) -> EncoderLayerParams:
    ones = lambda: Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
    zeros = lambda: Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
    return EncoderLayerParams(
        q=init_linear(rng, dim, dim),
        k=init_linear(rng, dim, dim),
        v=init_linear(rng, dim, dim),
        o=init_linear(rng, dim, dim),
        ffn1=init_linear(rng, dim, 4 * dim),
        ffn2=init_linear(rng, 4 * dim, dim),
        ln1_gain=ones(),
        ln1_bias=zeros(),
        ln2_gain=ones(),
        ln2_bias=zeros(),
    )


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 96
    norm_placement: str = "post"
    mixup_shared_linear: bool = True

    def __post_init__(self):
        if self.layers < 0 or self.heads < 1:
            raise ConfigurationError(f"invalid layer/head counts {self.layers}/{self.heads}")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.norm_placement not in ("post", "pre"):
            raise ConfigurationError(f"norm_placement must be 'post' or 'pre', got {self.norm_placement!r}")


@dataclass
class BackboneParams:
    mixup: LinearParams
    mixup_template: LinearParams | None  # used only when the gate is not shared
    layers: list[EncoderLayerParams] = field(default_factory=list)


def init_backbone(cfg: BackboneConfig, seed: int) -> BackboneParams:
    rng = named_stream(seed, "init.backbone")
    mixup = init_linear(rng, cfg.dim, cfg.dim)
    mixup_template = None if cfg.mixup_shared_linear else init_linear(rng, cfg.dim, cfg.dim)
    layers = [init_encoder_layer(rng, cfg.dim) for _ in range(cfg.layers)]
    return BackboneParams(mixup=mixup, mixup_template=mixup_template, layers=layers)


def modal_mixup(hx: Tensor, hz: Tensor, t: Tensor, gate: LinearParams, gate_template: LinearParams | None = None):
    """Gate both vision streams elementwise by the projected language vector.

    F = H * broadcast(gate(t)) + H for each stream; the same projection is
    applied to search and template unless a separate template gate is given.
    A zero gate output leaves both streams bit-exactly unchanged.
    """
    gx = gate(t)
    gz = gx if gate_template is None else gate_template(t)
    if hx.ndim == 3:  # batched: (B, N, D) * (B, 1, D)
        gx = nc.reshape(gx, (gx.shape[0], 1, gx.shape[-1]))
        gz = nc.reshape(gz, (gz.shape[0], 1, gz.shape[-1]))
    fx = hx * gx + hx
    fz = hz * gz + hz
    return fx, fz


def _mhsa(x: Tensor, p: EncoderLayerParams, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    scale = 1.0 / float(np.sqrt(dh))

    def split_heads(m):
        return nc.transpose(nc.reshape(m, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split_heads(p.q(x))
    k = split_heads(p.k(x))
    v = split_heads(p.v(x))
    scores = (q @ nc.transpose(k, (0, 1, 3, 2))) * scale
    attn = nc.softmax(scores, axis=-1)
    ctx = attn @ v  # (b, heads, t, dh)
    ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return p.o(ctx)


def _ffn(x: Tensor, p: EncoderLayerParams) -> Tensor:
    return p.ffn2(nc.gelu(p.ffn1(x)))


def encoder_layer(fx: Tensor, fz: Tensor, p: EncoderLayerParams, heads: int, norm_placement: str = "post"):
    """One encoder layer over the concatenated [search; template] sequence.

    Post placement (default) normalizes after each residual add; the pre
    variant normalizes sub-layer inputs instead. Returns the streams split
    back at the search token count.
    """
    single = fx.ndim == 2
    if single:
        fx = nc.reshape(fx, (1,) + tuple(fx.shape))
        fz = nc.reshape(fz, (1,) + tuple(fz.shape))
    n_x = fx.shape[1]
    x = nc.concat([fx, fz], axis=1)
    if norm_placement == "post":
        x = nc.layernorm(x + _mhsa(x, p, heads), p.ln1_gain, p.ln1_bias)
        x = nc.layernorm(x + _ffn(x, p), p.ln2_gain, p.ln2_bias)
    else:
        x = x + _mhsa(nc.layernorm(x, p.ln1_gain, p.ln1_bias), p, heads)
        x = x + _ffn(nc.layernorm(x, p.ln2_gain, p.ln2_bias), p)
    out_x = nc.narrow(x, 1, 0, n_x)
    out_z = nc.narrow(x, 1, n_x, x.shape[1] - n_x)
    if single:
        out_x = nc.reshape(out_x, tuple(out_x.shape[1:]))
        out_z = nc.reshape(out_z, tuple(out_z.shape[1:]))
    return out_x, out_z


def forward(hx: Tensor, hz: Tensor, t: Tensor | None, params: BackboneParams, cfg: BackboneConfig):
    """Mixup then the full encoder stack; returns last-layer (search, template) tokens.

    ``t`` is the reduced language vector; ``None`` runs the language-free
    path, which matches a zero mixup gate bit for bit.
    """
    if t is None:
        fx, fz = hx, hz
    else:
        fx, fz = modal_mixup(hx, hz, t, params.mixup, params.mixup_template)
    for layer in params.layers:
        fx, fz = encoder_layer(fx, fz, layer, cfg.heads, cfg.norm_placement)
    return fx, fz
