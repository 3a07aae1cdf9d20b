"""Binary checkpoint persistence.

Layout (all integers little-endian):

    magic "AIO1" | u32 version
    u32 config-text length | config text (canonical key=value, sorted)
    u32 param count | per param (name-sorted):
        u16 name length | name utf-8 | u8 ndim | u32 dims... | f32 payload
    u32 optimizer step | per param (same order): f32 m payload | f32 v payload
    u64 iteration counter
    u32 rng-state length | rng state json

Save -> load -> save is byte-identical; loading under a config whose model
shape disagrees with the stored snapshot fails fast.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import Config, parse_config_text
from .errors import CheckpointError

MAGIC = b"AIO1"
VERSION = 1

# keys that must agree between the stored snapshot and the requesting config
# for the parameter table to fit the model
MODEL_SHAPE_KEYS = (
    "patch",
    "search_size",
    "template_size",
    "dim",
    "layers",
    "heads",
    "n_t",
    "align_dim",
    "head_channels",
    "norm_placement",
    "mixup_shared_linear",
    "vocab_file",
)


@dataclass
class CheckpointState:
    config: Config
    params: dict
    optimizer: dict
    iteration: int
    rng_state: dict


def model_signature(cfg: Config) -> dict:
    return {k: getattr(cfg, k) for k in MODEL_SHAPE_KEYS}


def _encode_rng_state(state: dict) -> bytes:
    def normalize(value):
        if isinstance(value, dict):
            return {k: normalize(v) for k, v in value.items()}
        if isinstance(value, np.ndarray):
            return {"__ndarray__": value.tolist(), "dtype": value.dtype.name}
        if isinstance(value, (np.integer,)):
            return int(value)
        return value

    return json.dumps(normalize(state), sort_keys=True).encode("ascii")


def _decode_rng_state(blob: bytes) -> dict:
    def restore(value):
        if isinstance(value, dict):
            if "__ndarray__" in value:
                return np.array(value["__ndarray__"], dtype=value["dtype"])
            return {k: restore(v) for k, v in value.items()}
        return value

    return restore(json.loads(blob.decode("ascii")))


def save_checkpoint(path, cfg: Config, model, opt, iteration: int, rng_state: dict):
    params = model.named_parameters()
    opt_state = opt.state_dict()
    names = sorted(params)
    # run-local paths are not part of the experiment identity; keeping them
    # would make same-seed checkpoints differ byte-wise across run dirs
    config_blob = cfg.replace(data_dir="", out_dir="").to_text().encode("utf-8")
    rng_blob = _encode_rng_state(rng_state)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = np.ascontiguousarray(params[name].data, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
        fh.write(struct.pack("<I", opt_state["step"]))
        for name in names:
            fh.write(np.ascontiguousarray(opt_state["m"][name], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(opt_state["v"][name], dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", iteration))
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect: Config | None = None) -> CheckpointState:
    """Read a checkpoint; with ``expect`` given, reject model-shape mismatches."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (config_len,) = r.unpack("<I")
    stored_cfg = parse_config_text(r.take(config_len).decode("utf-8"))
    if expect is not None and model_signature(expect) != model_signature(stored_cfg):
        stored = model_signature(stored_cfg)
        asked = model_signature(expect)
        diff = {k: (stored[k], asked[k]) for k in stored if stored[k] != asked[k]}
        raise CheckpointError(f"{path}: model shape mismatch (stored, requested): {diff}")

    (n_params,) = r.unpack("<I")
    params = {}
    names = []
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
        params[name] = data
        names.append(name)
    (step,) = r.unpack("<I")
    m, v = {}, {}
    for name in names:
        count = params[name].size
        m[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(params[name].shape).copy()
        v[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(params[name].shape).copy()
    (iteration,) = r.unpack("<Q")
    (rng_len,) = r.unpack("<I")
    rng_state = _decode_rng_state(r.take(rng_len))
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return CheckpointState(
        config=stored_cfg,
        params=params,
        optimizer={"step": step, "m": m, "v": v},
        iteration=int(iteration),
        rng_state=rng_state,
    )
