"""Contrastive alignment of search, template, and language embeddings.

Each stream is mean-pooled and projected into a shared space; matched pairs
from the same video are pulled together against the rest of the batch with
temperature-scaled cosine InfoNCE. The cross-modal loss combines four
directional terms (search/template vs language, both ways); the intra-modal
loss aligns the two vision streams of a video against both vision streams of
every other video, i.e. 2(N-1) negatives per anchor.

The printed equations admit two readings of the denominator; ``standard``
(positive pair included, the usual InfoNCE, bounded below by zero) is the
default and ``literal`` (negatives only, unbounded below) is kept for
fidelity experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .backbone import LinearParams, init_linear
from .errors import ConfigurationError, ContractError
from .numcore import Tensor, named_stream

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.5
    denominator_mode: str = "standard"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.tau}")
        if self.denominator_mode not in ("standard", "literal"):
            raise ConfigurationError(f"unknown denominator mode {self.denominator_mode!r}")


@dataclass
class AlignProjections:
    """Three independent linear maps into the shared alignment space."""

    search: LinearParams
    template: LinearParams
    language: LinearParams


def init_align(dim: int, align_dim: int, seed: int) -> AlignProjections:
    rng = named_stream(seed, "init.align")
    return AlignProjections(
        search=init_linear(rng, dim, align_dim),
        template=init_linear(rng, dim, align_dim),
        language=init_linear(rng, dim, align_dim),
    )


def project_pool(tokens: Tensor, proj: LinearParams, mask=None, pool: str = "mean") -> Tensor:
    """Pool a token matrix to one vector, then project it.

    ``tokens`` is (N_tok, D) or (B, N_tok, D). ``mean`` averages rows
    (mask-weighted when a mask is given, so padded rows never contribute);
    ``first`` takes row 0, the [CLS]-style choice for the language stream.
    """
    tokens = nc.as_tensor(tokens)
    single = tokens.ndim == 2
    if single:
        tokens = nc.reshape(tokens, (1,) + tuple(tokens.shape))
    b, n, d = tokens.shape
    if n < 1:
        raise ContractError("project_pool needs at least one token")
    if pool == "first":
        pooled = nc.reshape(nc.narrow(tokens, 1, 0, 1), (b, d))
    elif pool == "mean":
        if mask is None:
            pooled = nc.mean(tokens, axis=1)
        else:
            m = np.asarray(mask, dtype=tokens.data.dtype).reshape(b, n)
            counts = m.sum(axis=1)
            if np.any(counts <= 0):
                raise ContractError("mask excludes every token")
            weighted = tokens * Tensor(m[:, :, None], dtype=tokens.dtype)
            pooled = nc.tensor_sum(weighted, axis=1) / Tensor(counts[:, None], dtype=tokens.dtype)
    else:
        raise ConfigurationError(f"unknown pooling {pool!r}")
    out = proj(pooled)
    return nc.reshape(out, (out.shape[-1],)) if single else out


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors, guarded against zero norms."""
    u = nc.as_tensor(u)
    v = nc.as_tensor(v)
    dot = nc.tensor_sum(u * v)
    nu = nc.sqrt(nc.tensor_sum(u * u))
    nv = nc.sqrt(nc.tensor_sum(v * v))
    return dot / (nu * nv + COSINE_EPS)


def _cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """S[i, j] = cos(a_i, b_j) with the same zero-norm guard as ``cosine``."""
    dots = a @ nc.transpose(b, (1, 0))
    na = nc.sqrt(nc.tensor_sum(a * a, axis=1, keepdims=True))
    nb = nc.sqrt(nc.tensor_sum(b * b, axis=1, keepdims=True))
    return dots / (na @ nc.transpose(nb, (1, 0)) + COSINE_EPS)


def _masks(n: int, dtype):
    eye = np.eye(n, dtype=dtype)
    return Tensor(eye), Tensor(1.0 - eye)


def _directional(pos_matrix: Tensor, neg_matrices: list[Tensor], cfg: ContrastConfig) -> Tensor:
    """Mean over anchors of -log(exp(pos/tau) / denominator).

    ``pos_matrix`` holds the positive similarity on its diagonal; the
    off-diagonal entries of every matrix in ``neg_matrices`` are the negative
    similarities. ``standard`` adds the positive term to the denominator.
    """
    n = pos_matrix.shape[0]
    dtype = pos_matrix.data.dtype
    eye, off = _masks(n, dtype)
    inv_tau = 1.0 / cfg.tau
    pos = nc.tensor_sum(pos_matrix * eye, axis=1) * inv_tau
    denom = nc.tensor_sum(nc.exp(neg_matrices[0] * inv_tau) * off, axis=1)
    for m in neg_matrices[1:]:
        denom = denom + nc.tensor_sum(nc.exp(m * inv_tau) * off, axis=1)
    if cfg.denominator_mode == "standard":
        denom = denom + nc.exp(pos)
    return nc.mean(nc.log(denom) - pos)


def _batched(*tensors):
    n = tensors[0].shape[0]
    if n < 2:
        raise ContractError(f"contrastive losses need a batch of at least 2, got {n}")
    for t in tensors:
        if t.ndim != 2 or t.shape[0] != n:
            raise ContractError("alignment embeddings must share the batch axis")
    return n


def cma_loss(fx: Tensor, fz: Tensor, ft: Tensor, cfg: ContrastConfig) -> Tensor:
    """Cross-modal loss: 0.5*(x2t + z2t) + 0.5*(t2z + t2x).

    Negatives for anchor i are the other N-1 samples' embeddings of the
    opposing modality.
    """
    _batched(fx, fz, ft)
    s_xt = _cosine_matrix(fx, ft)
    s_zt = _cosine_matrix(fz, ft)
    x2t = _directional(s_xt, [s_xt], cfg)
    z2t = _directional(s_zt, [s_zt], cfg)
    t2x = _directional(nc.transpose(s_xt, (1, 0)), [nc.transpose(s_xt, (1, 0))], cfg)
    t2z = _directional(nc.transpose(s_zt, (1, 0)), [nc.transpose(s_zt, (1, 0))], cfg)
    return 0.5 * (x2t + z2t) + 0.5 * (t2z + t2x)


def ima_loss(fx: Tensor, fz: Tensor, cfg: ContrastConfig) -> Tensor:
    """Intra-modal loss: 0.5*(x2z + z2x) with 2(N-1) vision negatives per anchor."""
    _batched(fx, fz)
    s_xz = _cosine_matrix(fx, fz)
    s_xx = _cosine_matrix(fx, fx)
    s_zz = _cosine_matrix(fz, fz)
    s_zx = nc.transpose(s_xz, (1, 0))
    x2z = _directional(s_xz, [s_xz, s_xx], cfg)
    z2x = _directional(s_zx, [s_zx, s_zz], cfg)
    return 0.5 * (x2z + z2x)
