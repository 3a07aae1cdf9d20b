"""Input embedders: image patches, text tokens, and language reduction.

Images are patchified in raster order and linearly projected; prompts go
through a deterministic lowercase word tokenizer over a fixed vocabulary (no
external tokenizer assets), are [CLS]-prefixed, and embedded by table lookup.
All functions are pure over immutable parameter tensors and accept either a
single sample or a leading batch axis.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, ContractError, VocabularyError
from .numcore import Tensor

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2
RESERVED = 3

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class PatchConfig:
    """Geometry of the patch embedders.

    ``patch`` must divide both crop sizes; token counts and the search grid
    side follow from the division.
    """

    patch: int = 8
    search_size: int = 64
    template_size: int = 32
    dim: int = 96

    def __post_init__(self):
        for name in ("search_size", "template_size"):
            size = getattr(self, name)
            if size % self.patch:
                raise ConfigurationError(f"{name}={size} is not divisible by patch={self.patch}")

    @property
    def n_search(self):
        return (self.search_size // self.patch) ** 2

    @property
    def n_template(self):
        return (self.template_size // self.patch) ** 2

    @property
    def grid(self):
        return self.search_size // self.patch

    @property
    def patch_vector(self):
        return 3 * self.patch * self.patch


@dataclass(frozen=True)
class Vocab:
    """Word list with dense ids; 0/1/2 are reserved for [PAD]/[CLS]/[UNK]."""

    words: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for i, word in enumerate(self.words):
            if word != word.lower():
                raise ConfigurationError(f"vocab word {word!r} is not lowercase")
            if word in index:
                raise ConfigurationError(f"duplicate vocab word {word!r}")
            index[word] = RESERVED + i
        object.__setattr__(self, "_index", index)

    @property
    def size(self):
        return RESERVED + len(self.words)

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def word_of(self, token_id: int) -> str:
        if token_id == PAD_ID:
            return "[PAD]"
        if token_id == CLS_ID:
            return "[CLS]"
        if token_id == UNK_ID:
            return "[UNK]"
        return self.words[token_id - RESERVED]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for word in self.words:
                fh.write(word + "\n")

    @classmethod
    def load(cls, path):
        """Vocab file format: one token per line, line number = id - 3."""
        with open(path, encoding="utf-8") as fh:
            words = [line.strip() for line in fh if line.strip()]
        return cls(tuple(words))


@dataclass(frozen=True)
class TokenizedPrompt:
    """Fixed-length id sequence for one prompt; ids[0] is always [CLS]."""

    ids: tuple[int, ...]
    mask: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.mask):
            raise ContractError("ids and mask lengths differ")
        if not self.ids or self.ids[0] != CLS_ID:
            raise ContractError("tokenized prompt must start with [CLS]")


def tokenize(prompt: str, vocab: Vocab, n_tokens: int) -> TokenizedPrompt:
    """Lowercase, strip punctuation, split on whitespace, map to ids.

    Prepends [CLS], truncates to ``n_tokens`` and pads with [PAD] (mask 0).
    Unknown words map to [UNK].
    """
    if n_tokens < 2:
        raise ContractError(f"n_tokens must be at least 2, got {n_tokens}")
    words = _WORD_RE.findall(prompt.lower())
    ids = [CLS_ID] + [vocab.id_of(w) for w in words]
    ids = ids[:n_tokens]
    mask = [1] * len(ids)
    while len(ids) < n_tokens:
        ids.append(PAD_ID)
        mask.append(0)
    return TokenizedPrompt(tuple(ids), tuple(mask))


def detokenize(tp: TokenizedPrompt, vocab: Vocab) -> str:
    return " ".join(vocab.word_of(i) for i, m in zip(tp.ids, tp.mask) if m and i != CLS_ID)


def embed_text(tp: TokenizedPrompt, table: Tensor) -> Tensor:
    """Look up one prompt's rows from the embedding table, shape (N_t, D)."""
    ids = np.asarray(tp.ids, dtype=np.int64)
    if ids.max(initial=0) >= table.shape[0]:
        raise VocabularyError(f"token id {int(ids.max())} outside table of {table.shape[0]} rows")
    return nc.take_rows(table, ids)


def patch_embed(img: Tensor, cfg: PatchConfig, proj: Tensor, pos: Tensor) -> Tensor:
    """Patchify, project to the token dimension, and add positional embeddings.

    ``img`` is (3, H, W) or (B, 3, H, W) with H, W divisible by the patch
    size. Patches are taken in raster order; each is flattened channel-major
    so token k is the dot product of patch k with the projection columns.
    """
    img = nc.as_tensor(img)
    single = img.ndim == 3
    shape = img.shape if not single else (1,) + tuple(img.shape)
    b, c, h, w = shape
    p = cfg.patch
    if h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    n = gh * gw
    if proj.shape != (3 * p * p, cfg.dim):
        raise ConfigurationError(f"projection shape {tuple(proj.shape)} != ({3 * p * p}, {cfg.dim})")
    if pos.shape != (n, cfg.dim):
        raise ConfigurationError(f"positional table shape {tuple(pos.shape)} != ({n}, {cfg.dim})")

    x = nc.reshape(img, (b, c, gh, p, gw, p))
    x = nc.transpose(x, (0, 2, 4, 1, 3, 5))  # (b, gh, gw, c, p, p)
    x = nc.reshape(x, (b, n, c * p * p))
    tokens = x @ proj + pos
    return nc.reshape(tokens, (n, cfg.dim)) if single else tokens


def reduce_language(tokens: Tensor, mask, mode: str = "mean", include_cls: bool = True) -> Tensor:
    """Collapse language tokens (N_t, D) or (B, N_t, D) to one vector per prompt.

    ``cls`` returns row 0; ``mean`` returns the mask-weighted average, by
    default including the [CLS] row. Padded rows never contribute.
    """
    if mode not in ("cls", "mean"):
        raise ConfigurationError(f"unknown language reduction mode {mode!r}")
    tokens = nc.as_tensor(tokens)
    single = tokens.ndim == 2
    if single:
        tokens = nc.reshape(tokens, (1,) + tuple(tokens.shape))
    b, n, d = tokens.shape
    m = np.asarray(mask, dtype=tokens.data.dtype).reshape(b, n)
    if mode == "cls":
        out = nc.reshape(nc.narrow(tokens, 1, 0, 1), (b, d))
    else:
        if not include_cls:
            m = m.copy()
            m[:, 0] = 0
        counts = m.sum(axis=1)
        if np.any(counts <= 0):
            raise ContractError("mean reduction needs at least one masked-in token")
        weighted = tokens * Tensor(m[:, :, None], dtype=tokens.dtype)
        out = nc.tensor_sum(weighted, axis=1) / Tensor(counts[:, None], dtype=tokens.dtype)
    return nc.reshape(out, (d,)) if single else out
