"""Run configuration: desk-scale defaults, flat key=value files, overrides.

The file format is plain ``key=value`` lines with ``#`` comments so diffs of
experiment configs stay readable; no parser dependency. Unknown keys are
rejected. CLI flags override file values, and the AIO_SEED environment
variable overrides the seed last.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigurationError


@dataclass
class Config:
    # reproducibility
    seed: int = 0

    # geometry and model size (desk profile; full-scale values remain valid)
    patch: int = 8
    search_size: int = 64
    template_size: int = 32
    dim: int = 96
    layers: int = 4
    heads: int = 4
    n_t: int = 16
    align_dim: int = 64
    head_channels: str = "64,32,16"
    norm_placement: str = "post"  # "post" (as the update equations read) | "pre"
    mixup_shared_linear: bool = True

    # language handling
    token_reduce: str = "mean"  # "cls" | "mean"
    mean_includes_cls: bool = True
    lang_pool: str = "mean"  # alignment pooling for the language stream: "mean" | "first"
    # word-embedding init scale; sized so the reduced language vector and the
    # mixup gate carry O(1) signal into the vision streams from step one
    text_embed_std: float = 1.0

    # losses
    tau: float = 0.5
    denominator_mode: str = "standard"  # "standard" | "literal"
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    lambda_cma: float = 1.0
    lambda_ima: float = 1.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0

    # training recipe
    lr: float = 4e-4
    weight_decay: float = 1e-4
    iters: int = 2000
    batch_size: int = 8
    clip_norm: float = 1.0
    jitter: float = 0.25
    log_every: int = 10
    checkpoint_every: int = 500
    train_prompt: str = "sentence"  # "sentence" | "class"

    # evaluation / inference
    eval_prompt: str = "sentence"
    window_enabled: bool = True
    window_weight: float = 0.49

    # ablations: "none" | "no-mma" (contrastive weights zeroed) |
    # "vision-only" (additionally skips the language mixup)
    ablate: str = "none"

    # data
    canvas: int = 128
    num_frames: int = 40
    vocab_file: str = ""  # empty: the generator grammar's builtin vocab
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.patch <= 0 or self.search_size % self.patch or self.template_size % self.patch:
            raise ConfigurationError("patch must divide search_size and template_size")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        for name in ("lambda_giou", "lambda_l1", "lambda_cma", "lambda_ima"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        for name, allowed in (
            ("norm_placement", ("post", "pre")),
            ("token_reduce", ("cls", "mean")),
            ("lang_pool", ("mean", "first")),
            ("denominator_mode", ("standard", "literal")),
            ("train_prompt", ("sentence", "class")),
            ("eval_prompt", ("sentence", "class")),
            ("ablate", ("none", "no-mma", "vision-only")),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.batch_size < 2 and self.ablate == "none" and (self.lambda_cma > 0 or self.lambda_ima > 0):
            raise ConfigurationError("contrastive losses need batch_size >= 2")
        self.head_channel_plan  # validates the channel string
        if self.n_t < 2:
            raise ConfigurationError("n_t must be at least 2")

    @property
    def head_channel_plan(self):
        try:
            plan = tuple(int(v) for v in self.head_channels.split(","))
        except ValueError:
            raise ConfigurationError(f"bad head_channels {self.head_channels!r}") from None
        if len(plan) != 3 or any(c <= 0 for c in plan):
            raise ConfigurationError(f"head_channels needs 3 positive widths, got {self.head_channels!r}")
        return plan

    def replace(self, **kwargs) -> "Config":
        return dataclasses.replace(self, **kwargs)

    def to_text(self) -> str:
        """Canonical serialization: sorted keys, one per line."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _parse_value(field, raw: str):
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("bool", bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"bad boolean {raw!r} for {field.name}")
    return raw


def parse_config_text(text: str, base: Config | None = None) -> Config:
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        field = _FIELDS.get(key)
        if field is None:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(field, raw)
    return Config(**values)


def load_config(path, base: Config | None = None) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)
