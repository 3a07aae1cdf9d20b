"""Training and one-pass evaluation.

Loss assembly follows the multi-task recipe: classification (focal) plus the
weighted regression pair (GIoU + L1) plus the two contrastive alignment
terms. Training is a single-writer loop with decoupled weight decay, cosine
learning-rate decay, and global-norm gradient clipping. Evaluation runs each
sequence once from the first-frame box and scores five metrics.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .align import cma_loss, ima_loss
from .config import Config
from .embedders import Vocab, tokenize
from .errors import ContractError, TrainingDiverged
from .head import BBox, decode, focal_loss, gaussian_target, giou_loss_tensor, l1_loss_tensor
from .model import TrackerModel
from .numcore import Tape, Tensor, named_stream
from .synthdata import (
    SequenceRecord,
    crop_and_resize,
    crop_side_for,
    grammar_vocab,
    list_sequences,
    read_lasot_format,
    sample_pair,
)


def resolve_vocab(cfg: Config) -> Vocab:
    if cfg.vocab_file:
        return Vocab.load(cfg.vocab_file)
    return grammar_vocab()


# ---------------------------------------------------------------------------
# Batches and loss assembly
# ---------------------------------------------------------------------------


@dataclass
class SampleBatch:
    """Aligned crops, tokenized prompts, and ground truth for N videos."""

    search: np.ndarray  # (B, 3, Hx, Wx)
    template: np.ndarray  # (B, 3, Hz, Wz)
    ids: np.ndarray  # (B, N_t) int64
    mask: np.ndarray  # (B, N_t) float32
    boxes: np.ndarray  # (B, 4) cxcywh in search-crop pixels

    def __len__(self):
        return self.search.shape[0]


def assemble_batch(samples, vocab: Vocab, n_t: int) -> SampleBatch:
    ids, masks = [], []
    for s in samples:
        tp = tokenize(s.prompt, vocab, n_t)
        ids.append(tp.ids)
        masks.append(tp.mask)
    return SampleBatch(
        search=np.stack([s.search for s in samples]),
        template=np.stack([s.template for s in samples]),
        ids=np.asarray(ids, dtype=np.int64),
        mask=np.asarray(masks, dtype=np.float32),
        boxes=np.asarray([[s.gt_box.cx, s.gt_box.cy, s.gt_box.w, s.gt_box.h] for s in samples], dtype=np.float32),
    )


@dataclass(frozen=True)
class LossWeights:
    giou: float = 2.0
    l1: float = 5.0
    cma: float = 1.0
    ima: float = 1.0

    @classmethod
    def from_config(cls, cfg: Config) -> "LossWeights":
        if cfg.ablate == "no-mma" or cfg.ablate == "vision-only":
            return cls(cfg.lambda_giou, cfg.lambda_l1, 0.0, 0.0)
        return cls(cfg.lambda_giou, cfg.lambda_l1, cfg.lambda_cma, cfg.lambda_ima)


def build_regression_targets(boxes: np.ndarray, grid: int, patch: int):
    """Per-sample heatmaps, center-cell one-hots, and normalized gt boxes."""
    b = boxes.shape[0]
    crop_side = grid * patch
    heat = np.zeros((b, 1, grid, grid), dtype=np.float32)
    onehot = np.zeros((b, 1, grid, grid), dtype=np.float32)
    cells = np.zeros((b, 2), dtype=np.float32)  # (j, i) per sample
    for k in range(b):
        cx, cy = boxes[k, 0], boxes[k, 1]
        j = min(grid - 1, max(0, int(cx // patch)))
        i = min(grid - 1, max(0, int(cy // patch)))
        heat[k] = gaussian_target((i, j), grid)
        onehot[k, 0, i, j] = 1.0
        cells[k] = (j, i)
    gt_norm = boxes.astype(np.float32) / crop_side
    return heat, onehot, cells, gt_norm


def predicted_boxes_at_cells(out, onehot: np.ndarray, cells: np.ndarray, grid: int) -> Tensor:
    """Assemble normalized (B, 4) boxes from the maps at the true center cells."""
    mask = Tensor(onehot, dtype=out.offset.dtype)
    off = nc.tensor_sum(out.offset * mask, axis=(2, 3))  # (B, 2) -> (ox, oy)
    size = nc.tensor_sum(out.size * mask, axis=(2, 3))  # (B, 2) -> (w, h)
    cell_const = Tensor(cells, dtype=out.offset.dtype)  # (j, i)
    centers = (off + cell_const) * (1.0 / grid)
    return nc.concat([centers, size], axis=1)


def compute_losses(model: TrackerModel, batch: SampleBatch, cfg: Config) -> dict:
    """Forward the batch and return every loss component as a scalar tensor."""
    weights = LossWeights.from_config(cfg)
    use_language = cfg.ablate != "vision-only"
    fw = model.forward(batch.search, batch.template, batch.ids, batch.mask, use_language=use_language)
    grid = model.patch_cfg.grid
    heat, onehot, cells, gt_norm = build_regression_targets(batch.boxes, grid, cfg.patch)

    pred = predicted_boxes_at_cells(fw.head, onehot, cells, grid)
    losses = {
        "cls": focal_loss(fw.head.score, heat, cfg.focal_alpha, cfg.focal_beta),
        "giou": giou_loss_tensor(pred, gt_norm),
        "l1": l1_loss_tensor(pred, gt_norm),
    }
    if weights.cma > 0:
        losses["cma"] = cma_loss(fw.align_search, fw.align_template, fw.align_language, model.contrast_cfg)
    if weights.ima > 0:
        losses["ima"] = ima_loss(fw.align_search, fw.align_template, model.contrast_cfg)
    return losses


def total_loss(components: dict, weights: LossWeights):
    """L_total = L_cls + (w_giou*L_giou + w_l1*L_1) + w_cma*L_cma + w_ima*L_ima.

    Returns the scalar tensor and a float breakdown for logging; absent
    contrastive components count as zero.
    """
    zero = Tensor(np.zeros((), dtype=np.float32))
    cls = components.get("cls", zero)
    giou = components.get("giou", zero)
    l1 = components.get("l1", zero)
    cma = components.get("cma", zero)
    ima = components.get("ima", zero)
    total = cls + (weights.giou * giou + weights.l1 * l1) + weights.cma * cma + weights.ima * ima
    breakdown = {
        "total": total.item(),
        "cls": cls.item(),
        "giou": giou.item(),
        "l1": l1.item(),
        "cma": cma.item(),
        "ima": ima.item(),
    }
    return total, breakdown


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay over a named parameter table."""

    def __init__(self, params: dict, lr=4e-4, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self, lr=None):
        """One update; parameters without gradients are left untouched."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            t.data -= lr * update + lr * self.weight_decay * t.data

    def state_dict(self):
        return {
            "step": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        for k in self.m:
            self.m[k] = np.ascontiguousarray(state["m"][k], dtype=np.float32)
            self.v[k] = np.ascontiguousarray(state["v"][k], dtype=np.float32)


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def train_step(model: TrackerModel, batch: SampleBatch, opt: AdamW, cfg: Config, lr=None) -> dict:
    """One forward/backward/update; aborts with a diagnostic on non-finite loss."""
    if len(batch) < 2 and (cfg.lambda_cma > 0 or cfg.lambda_ima > 0) and cfg.ablate == "none":
        raise ContractError("contrastive losses need a batch of at least 2")
    weights = LossWeights.from_config(cfg)
    opt.zero_grad()
    with Tape() as tape:
        components = compute_losses(model, batch, cfg)
        total, breakdown = total_loss(components, weights)
        if not math.isfinite(breakdown["total"]):
            raise TrainingDiverged(f"non-finite loss; components: {breakdown}")
        tape.backward(total)
    breakdown["grad_norm"] = clip_gradients(opt.params, cfg.clip_norm)
    opt.step(lr)
    return breakdown


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("iter", "L_total", "L_cls", "L_giou", "L_1", "L_cma", "L_ima")


def load_dataset(dataset_dir) -> list[SequenceRecord]:
    seq_dirs = list_sequences(dataset_dir)
    if not seq_dirs:
        raise ContractError(f"no sequences found under {dataset_dir}")
    return [read_lasot_format(d) for d in seq_dirs]


def sample_training_batch(records, rng, cfg: Config, vocab: Vocab) -> SampleBatch:
    n = len(records)
    if cfg.batch_size <= n:
        idxs = rng.choice(n, size=cfg.batch_size, replace=False)
    else:
        idxs = rng.integers(0, n, size=cfg.batch_size)
    samples = [
        sample_pair(
            records[int(i)],
            rng,
            template_size=cfg.template_size,
            search_size=cfg.search_size,
            stride=cfg.patch,
            jitter=cfg.jitter,
            prompt_mode=cfg.train_prompt,
        )
        for i in idxs
    ]
    return assemble_batch(samples, vocab, cfg.n_t)


def train(cfg: Config, dataset_dir, out_dir, resume=None, quiet=False):
    """Full training run; returns (model, final checkpoint path, seconds)."""
    from .checkpoint import load_checkpoint, save_checkpoint

    os.makedirs(out_dir, exist_ok=True)
    vocab = resolve_vocab(cfg)
    records = load_dataset(dataset_dir)
    model = TrackerModel(cfg, vocab)
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sampler = named_stream(cfg.seed, "train.sampler")
    start_iter = 0
    log_path = os.path.join(out_dir, "loss_log.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.aio")

    if resume is not None:
        state = load_checkpoint(resume, expect=cfg)
        model.load_state(state.params)
        opt.load_state_dict(state.optimizer)
        sampler.bit_generator.state = state.rng_state
        start_iter = state.iteration
        log_mode = "a" if os.path.isfile(log_path) else "w"
    else:
        log_mode = "w"

    started = time.perf_counter()
    with open(log_path, log_mode, newline="", encoding="ascii") as log_file:
        writer = csv.writer(log_file)
        if log_mode == "w":
            writer.writerow(LOG_COLUMNS)
        for it in range(start_iter, cfg.iters):
            batch = sample_training_batch(records, sampler, cfg, vocab)
            lr = cosine_lr(cfg.lr, it, cfg.iters)
            try:
                breakdown = train_step(model, batch, opt, cfg, lr)
            except TrainingDiverged:
                # the last periodic checkpoint stays on disk untouched
                raise
            step = it + 1
            if step % cfg.log_every == 0 or step == cfg.iters:
                writer.writerow(
                    [
                        step,
                        f"{breakdown['total']:.6f}",
                        f"{breakdown['cls']:.6f}",
                        f"{breakdown['giou']:.6f}",
                        f"{breakdown['l1']:.6f}",
                        f"{breakdown['cma']:.6f}",
                        f"{breakdown['ima']:.6f}",
                    ]
                )
                if not quiet:
                    print(f"iter {step}/{cfg.iters} loss {breakdown['total']:.4f} lr {lr:.2e}")
            if step % cfg.checkpoint_every == 0 and step != cfg.iters:
                save_checkpoint(ckpt_path, cfg, model, opt, step, sampler.bit_generator.state)
    save_checkpoint(ckpt_path, cfg, model, opt, cfg.iters, sampler.bit_generator.state)
    return model, ckpt_path, time.perf_counter() - started


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------


def _prompt_arrays(prompt: str, vocab: Vocab, n_t: int):
    tp = tokenize(prompt, vocab, n_t)
    return (
        np.asarray([tp.ids], dtype=np.int64),
        np.asarray([tp.mask], dtype=np.float32),
    )


def track_sequence(
    model: TrackerModel,
    record: SequenceRecord,
    cfg: Config,
    prompt_override: str | None = None,
    init_box: BBox | None = None,
) -> list[BBox]:
    """One-pass tracking: fixed template from frame 0, no re-detection.

    The prediction for frame 0 is the given box; each later frame is searched
    around the previous prediction at 4x scale.
    """
    if prompt_override is not None:
        prompt = prompt_override
    else:
        prompt = record.prompt if cfg.eval_prompt == "sentence" else record.class_word
    ids, mask = _prompt_arrays(prompt, model.vocab, cfg.n_t)
    use_language = cfg.ablate != "vision-only"

    first = init_box if init_box is not None else record.boxes[0]
    template, _ = crop_and_resize(
        record.frame(0), (first.cx, first.cy), max(8.0, crop_side_for(first, 2.0)), cfg.template_size, cfg.patch
    )
    template = template[None]
    window = cfg.window_weight if cfg.window_enabled else 0.0

    preds = [first]
    prev = first
    for t in range(1, len(record)):
        search, meta = crop_and_resize(
            record.frame(t), (prev.cx, prev.cy), max(8.0, crop_side_for(prev, 4.0)), cfg.search_size, cfg.patch
        )
        fw = model.forward(search[None], template, ids, mask, use_language=use_language)
        box = decode(fw.head, meta, window_weight=window, image_size=record.canvas)
        preds.append(box)
        prev = box
    return preds


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

SUCCESS_THRESHOLDS = tuple(np.round(np.linspace(0.0, 1.0, 21), 10).tolist())
PRECISION_THRESHOLDS = tuple(float(v) for v in range(0, 51))
NORM_PRECISION_THRESHOLDS = tuple(np.round(np.arange(0, 101) * 0.005, 10).tolist())
CENTER_ERROR_LIMIT = 20.0


def iou(a: BBox, b: BBox) -> float:
    # areas come from the same corner values as the intersection so that
    # identical boxes score exactly 1.0
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def complete_iou(a: BBox, b: BBox) -> float:
    """IoU minus the squared center distance over the enclosing-box diagonal,
    clamped to [0, 1]."""
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    hull_w = max(ax2, bx2) - min(ax1, bx1)
    hull_h = max(ay2, by2) - min(ay1, by1)
    c2 = hull_w**2 + hull_h**2
    rho2 = (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2
    penalty = rho2 / c2 if c2 > 0 else 0.0
    return min(1.0, max(0.0, iou(a, b) - penalty))


# Named plug-ins for the protocol-defined metrics whose exact formulas are
# delegated elsewhere; swap entries to change the definition.
OVERLAP_VARIANTS = {"ciou": complete_iou, "iou": iou}
ACCURACY_VARIANTS = {"mean_iou": lambda ious: float(np.mean(ious)) if len(ious) else 0.0}


@dataclass
class MetricReport:
    """Five metrics plus the threshold curves backing them."""

    p: float
    p_norm: float
    auc: float
    cauc: float
    acc: float
    n_frames: int
    curves: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "P": self.p,
            "P_norm": self.p_norm,
            "AUC": self.auc,
            "cAUC": self.cauc,
            "ACC": self.acc,
            "n_frames": self.n_frames,
        }


def compute_metrics(preds, gts, cauc_variant="ciou", acc_variant="mean_iou") -> MetricReport:
    """Score aligned prediction/ground-truth box sequences.

    Success-style curves count ties as successes (metric >= threshold) and
    their area is the arithmetic mean over the threshold sweep.
    """
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions vs {len(gts)} ground-truth boxes")
    if not preds:
        raise ContractError("empty sequences cannot be scored")
    overlap = OVERLAP_VARIANTS[cauc_variant]
    ious = np.array([iou(p, g) for p, g in zip(preds, gts)])
    compl = np.array([overlap(p, g) for p, g in zip(preds, gts)])
    errs = np.array([math.hypot(p.cx - g.cx, p.cy - g.cy) for p, g in zip(preds, gts)])
    nerrs = np.array(
        [math.hypot((p.cx - g.cx) / max(g.w, 1e-9), (p.cy - g.cy) / max(g.h, 1e-9)) for p, g in zip(preds, gts)]
    )

    success = [float(np.mean(ious >= t)) for t in SUCCESS_THRESHOLDS]
    csuccess = [float(np.mean(compl >= t)) for t in SUCCESS_THRESHOLDS]
    precision = [float(np.mean(errs <= t)) for t in PRECISION_THRESHOLDS]
    norm_precision = [float(np.mean(nerrs <= t)) for t in NORM_PRECISION_THRESHOLDS]

    return MetricReport(
        p=float(np.mean(errs <= CENTER_ERROR_LIMIT)),
        p_norm=float(np.mean(norm_precision)),
        auc=float(np.mean(success)),
        cauc=float(np.mean(csuccess)),
        acc=ACCURACY_VARIANTS[acc_variant](ious),
        n_frames=len(preds),
        curves={
            "success": (list(SUCCESS_THRESHOLDS), success),
            "csuccess": (list(SUCCESS_THRESHOLDS), csuccess),
            "precision": (list(PRECISION_THRESHOLDS), precision),
            "norm_precision": (list(NORM_PRECISION_THRESHOLDS), norm_precision),
        },
    )


def aggregate_reports(reports: dict) -> dict:
    """Average per-sequence metrics (sequence-weighted, sorted reduce)."""
    names = ("P", "P_norm", "AUC", "cAUC", "ACC")
    means = {}
    for name in names:
        means[name] = float(np.mean([reports[k].as_dict()[name] for k in sorted(reports)])) if reports else 0.0
    return means


def average_curves(reports: dict, curve: str):
    keys = sorted(reports)
    thresholds = reports[keys[0]].curves[curve][0]
    stacked = np.array([reports[k].curves[curve][1] for k in keys])
    return thresholds, stacked.mean(axis=0).tolist()


# ---------------------------------------------------------------------------
# Evaluation harness
# ---------------------------------------------------------------------------


def evaluate(model: TrackerModel, dataset_dir, cfg: Config, out_dir=None, oracle_gt=False):
    """Track every sequence, score it, and (optionally) write the reports.

    ``oracle_gt`` replaces the tracker output with the ground truth, a sanity
    path that must score 1.0 everywhere. Returns (summary, per-sequence
    reports).
    """
    records = load_dataset(dataset_dir)
    reports = {}
    for record in records:
        if oracle_gt:
            preds = list(record.boxes)
        else:
            preds = track_sequence(model, record, cfg)
        reports[record.seq_id] = compute_metrics(preds, record.boxes)
    summary = aggregate_reports(reports)
    if out_dir is not None:
        write_reports(out_dir, summary, reports)
    return summary, reports


def write_reports(out_dir, summary, reports):
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "summary": summary,
        "sequences": {k: reports[k].as_dict() for k in sorted(reports)},
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    for curve in ("success", "precision", "norm_precision", "csuccess"):
        thresholds, values = average_curves(reports, curve)
        with open(os.path.join(out_dir, f"{curve}_curve.csv"), "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "value"])
            for t, v in zip(thresholds, values):
                writer.writerow([f"{t:.6g}", f"{v:.6f}"])


# ---------------------------------------------------------------------------
# Twin-disambiguation protocol
# ---------------------------------------------------------------------------


def swap_prompt_color(record: SequenceRecord) -> str:
    """The sequence prompt with the target color replaced by the twin's."""
    target = next(o for o in record.objects if o.role == "target")
    twin = next(o for o in record.objects if o.role == "twin")
    return record.prompt.replace(target.color, twin.color, 1)


def twin_follow_counts(model: TrackerModel, record: SequenceRecord, cfg: Config, prompt: str):
    """Per-frame winner counts for one prompt: (target frames, twin frames, total).

    A frame follows whichever twin the prediction overlaps more; frames
    overlapping neither count toward neither. The Hanning window is disabled:
    this protocol asks which object the appearance/language evidence selects,
    and a motion prior would veto any off-center flip by construction.
    """
    target = next(o for o in record.objects if o.role == "target")
    twin = next(o for o in record.objects if o.role == "twin")
    preds = track_sequence(model, record, cfg.replace(window_enabled=False), prompt_override=prompt)
    follows_target = follows_twin = 0
    total = len(record) - 1
    for t in range(1, len(record)):
        iou_target = iou(preds[t], BBox(*target.boxes[t], "image"))
        iou_twin = iou(preds[t], BBox(*twin.boxes[t], "image"))
        if iou_target > iou_twin:
            follows_target += 1
        elif iou_twin > iou_target:
            follows_twin += 1
    return follows_target, follows_twin, total


def twin_disambiguation(model: TrackerModel, dataset_dir, cfg: Config) -> dict:
    """Aggregate follow rates over a twin-distractor suite.

    correct_rate: fraction of frames on the prompt-designated twin under the
    true prompt. flip_rate: fraction on the other twin once the prompt color
    is swapped (same first-frame box).
    """
    records = load_dataset(dataset_dir)
    correct = flip = total = 0
    for record in records:
        twins = [o for o in record.objects if o.role == "twin"]
        if not twins:
            raise ContractError(f"sequence {record.seq_id} has no twin distractor")
        on_target, _, n = twin_follow_counts(model, record, cfg, record.prompt)
        _, on_twin, _ = twin_follow_counts(model, record, cfg, swap_prompt_color(record))
        correct += on_target
        flip += on_twin
        total += n
    return {
        "correct_rate": correct / total if total else 0.0,
        "flip_rate": flip / total if total else 0.0,
        "frames": total,
    }
