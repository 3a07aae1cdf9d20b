"""Reproduction recipes and verification harnesses.

Each recipe in the recipes/ directory is a JSON file naming a sequence of
commands plus a named outcome check, so every acceptance-level claim maps to
one runnable unit. ``python -m vltrack.docsbench <name>`` runs one recipe;
``--all`` runs everything and can emit a JUnit-style XML report.
"""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .config import Config
from .errors import VLTrackError
from .numcore import Tensor, grad_check, named_stream

RECIPES_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))), "recipes")

# A spread of parameters touching every module, checked for every loss; a
# loss that does not depend on one of them simply has a zero gradient there.
GRADCHECK_PARAMS = (
    "embed.patch_proj",
    "embed.pos_search",
    "embed.text_table",
    "mixup.weight",
    "enc0.q.weight",
    "enc1.ffn1.weight",
    "enc3.o.weight",
    "enc2.ln1.gain",
    "align.search.weight",
    "align.language.bias",
    "head.score.conv0.kernels",
    "head.offset.conv3.bias",
    "head.size.conv1.kernels",
)


def micro_batch(cfg: Config, vocab, n=2):
    """A small in-memory training batch: n twin scenarios, one pair each."""
    from .pipeline import assemble_batch
    from .synthdata import COLORS, MOTIONS, SHAPES, Scenario, memory_record, sample_pair

    rng = named_stream(cfg.seed, "gradcheck.batch")
    samples = []
    for i in range(n):
        scenario = Scenario(
            seed=9000 + i,
            shape=SHAPES[i % len(SHAPES)],
            color=COLORS[i % len(COLORS)],
            motion=MOTIONS[i % len(MOTIONS)],
            distractor_count=1,
            twin=True,
            clutter=0.4,
            num_frames=4,
            canvas=cfg.canvas,
        )
        record = memory_record(scenario, seq_id=f"micro{i}")
        samples.append(
            sample_pair(
                record,
                rng,
                template_size=cfg.template_size,
                search_size=cfg.search_size,
                stride=cfg.patch,
                jitter=cfg.jitter,
                prompt_mode=cfg.train_prompt,
            )
        )
    return assemble_batch(samples, vocab, cfg.n_t)


def gradient_fidelity(cfg: Config | None = None, h=1e-6, tol=1e-3, coords_per_param=3):
    """Check every loss gradient on a 2-video micro-batch at desk config.

    The model is cloned to float64 and each loss (plus the weighted total)
    is compared against central differences on a representative parameter
    spread. The probe step defaults to 1e-6: the composite objective has
    ReLU kinks and cosine curvature at scales around 1e-3, so the probe must
    sit well inside the smooth neighborhood of the evaluation point (the
    float64 noise floor is still three orders below the tolerance).
    Returns a JSON-friendly report.
    """
    from .model import TrackerModel
    from .pipeline import LossWeights, compute_losses, resolve_vocab, total_loss

    cfg = (cfg or Config()).replace(batch_size=2)
    vocab = resolve_vocab(cfg)
    model = TrackerModel(cfg, vocab).astype(np.float64)
    batch = micro_batch(cfg, vocab, n=2)
    params = model.named_parameters()
    chosen = [name for name in GRADCHECK_PARAMS if name in params]
    inputs = [params[name] for name in chosen]
    weights = LossWeights.from_config(cfg)

    def loss_fn(name):
        if name == "total":
            return lambda *_: total_loss(compute_losses(model, batch, cfg), weights)[0]
        return lambda *_: compute_losses(model, batch, cfg)[name]

    started = time.perf_counter()
    report = {"h": h, "tol": tol, "losses": {}, "params": chosen}
    for name in ("cls", "giou", "l1", "cma", "ima", "total"):
        result = grad_check(loss_fn(name), inputs, h=h, tol=tol, max_coords_per_input=coords_per_param)
        report["losses"][name] = {
            "max_rel_err": result.max_rel_err,
            "passed": result.passed,
            "coords": len(result.coords),
        }
    report["runtime_s"] = time.perf_counter() - started
    report["passed"] = all(entry["passed"] for entry in report["losses"].values())
    return report


# ---------------------------------------------------------------------------
# Recipes
# ---------------------------------------------------------------------------


@dataclass
class ExperimentRecipe:
    name: str
    description: str
    expected: str
    commands: list
    check: dict = field(default_factory=dict)
    runtime_hint: str = "seconds"
    criteria: list = field(default_factory=list)


@dataclass
class RecipeResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def load_recipes(recipes_dir=None) -> dict:
    recipes_dir = recipes_dir or RECIPES_DIR
    recipes = {}
    if not os.path.isdir(recipes_dir):
        raise VLTrackError(f"recipes directory not found: {recipes_dir}")
    for fname in sorted(os.listdir(recipes_dir)):
        if not fname.endswith(".json"):
            continue
        with open(os.path.join(recipes_dir, fname), encoding="utf-8") as fh:
            raw = json.load(fh)
        recipes[raw["name"]] = ExperimentRecipe(**raw)
    return recipes


def twin_eval_command(argv) -> int:
    """Twin-suite follow/flip rates for a model and its no-MMA ablation."""
    import argparse

    from .checkpoint import load_checkpoint
    from .model import TrackerModel
    from .pipeline import resolve_vocab, twin_disambiguation

    parser = argparse.ArgumentParser(prog="twin-eval")
    parser.add_argument("--data", required=True)
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--ablation")
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    def rates(ckpt_path):
        state = load_checkpoint(ckpt_path)
        model = TrackerModel(state.config, resolve_vocab(state.config))
        model.load_state(state.params)
        return twin_disambiguation(model, args.data, state.config)

    payload = {"vl": rates(args.ckpt)}
    if args.ablation:
        payload["ablation"] = rates(args.ablation)
    with open(args.out, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    for name, entry in payload.items():
        print(f"{name}: correct {entry['correct_rate']:.3f} flip {entry['flip_rate']:.3f} over {entry['frames']} frames")
    return 0


def _repo_root():
    return os.path.dirname(RECIPES_DIR)


def _run_command(command: str, workdir: str) -> int:
    """Run one recipe command; vltrack subcommands run in-process."""
    argv = [a.replace("{work}", workdir) for a in shlex.split(command)]
    if argv[0] == "vltrack":
        from .cli import main as cli_main

        return cli_main(argv[1:])
    if argv[0] == "twin-eval":
        return twin_eval_command(argv[1:])
    if argv[0] == "pytest":
        return subprocess.call([sys.executable, "-m", "pytest", *argv[1:]], cwd=_repo_root())
    return subprocess.call(argv)


def _json_path(workdir, rel):
    with open(os.path.join(workdir, rel), encoding="utf-8") as fh:
        return json.load(fh)


def _check_outcome(check: dict, workdir: str) -> tuple[bool, str]:
    kind = check.get("kind", "exit-zero")
    if kind == "exit-zero":
        return True, "commands exited 0"
    if kind == "json-min":
        payload = _json_path(workdir, check["file"])
        value = payload
        for key in check["path"]:
            value = value[key]
        ok = value >= check["min"]
        return ok, f"{'.'.join(check['path'])} = {value:.4f} (need >= {check['min']})"
    if kind == "json-flag":
        payload = _json_path(workdir, check["file"])
        value = payload
        for key in check["path"]:
            value = value[key]
        return bool(value), f"{'.'.join(check['path'])} = {value}"
    if kind == "twin-rates":
        payload = _json_path(workdir, check["file"])
        correct = payload["vl"]["correct_rate"]
        flip = payload["vl"]["flip_rate"]
        ok = correct >= check["min_correct"] and flip >= check["min_flip"]
        ablation = payload.get("ablation", {})
        detail = (
            f"correct {correct:.3f} (need >= {check['min_correct']}), "
            f"flip {flip:.3f} (need >= {check['min_flip']}); "
            f"ablation correct {ablation.get('correct_rate', float('nan')):.3f} "
            f"flip {ablation.get('flip_rate', float('nan')):.3f}"
        )
        return ok, detail
    if kind == "identical":
        details = []
        all_same = True
        for a_rel, b_rel in check["pairs"]:
            a = os.path.join(workdir, a_rel)
            b = os.path.join(workdir, b_rel)
            same = _same_bytes(a, b)
            all_same &= same
            details.append(f"{a_rel} vs {b_rel}: {'identical' if same else 'DIFFER'}")
        return all_same, "; ".join(details)
    raise VLTrackError(f"unknown recipe check kind {kind!r}")


def _same_bytes(a, b) -> bool:
    """Byte-compare two files, or two directory trees file by file."""
    import filecmp

    if os.path.isdir(a) and os.path.isdir(b):
        a_files = sorted(
            os.path.relpath(os.path.join(r, f), a) for r, _, fs in os.walk(a) for f in fs
        )
        b_files = sorted(
            os.path.relpath(os.path.join(r, f), b) for r, _, fs in os.walk(b) for f in fs
        )
        if a_files != b_files:
            return False
        return all(filecmp.cmp(os.path.join(a, f), os.path.join(b, f), shallow=False) for f in a_files)
    return os.path.isfile(a) and os.path.isfile(b) and filecmp.cmp(a, b, shallow=False)


def run_recipe(name: str, workdir=None, recipes_dir=None, quiet=False) -> RecipeResult:
    """Execute one recipe's commands and evaluate its outcome check."""
    recipes = load_recipes(recipes_dir)
    if name not in recipes:
        raise VLTrackError(f"no recipe named {name!r}; available: {', '.join(sorted(recipes))}")
    recipe = recipes[name]
    workdir = workdir or tempfile.mkdtemp(prefix=f"recipe-{name}-")
    os.makedirs(workdir, exist_ok=True)
    started = time.perf_counter()
    for command in recipe.commands:
        if not quiet:
            print(f"[{name}] $ {command.replace('{work}', workdir)}")
        code = _run_command(command, workdir)
        if code != 0:
            missing = f"command failed with exit {code}: {command}"
            return RecipeResult(name, False, f"{missing}; run `vltrack generate` first if inputs are missing", time.perf_counter() - started)
    passed, detail = _check_outcome(recipe.check, workdir)
    return RecipeResult(name, passed, detail, time.perf_counter() - started)


def write_junit(results, path):
    total = len(results)
    failures = sum(0 if r.passed else 1 for r in results)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<testsuite name="recipes" tests="{total}" failures="{failures}">',
    ]
    for r in results:
        lines.append(f'  <testcase name="{escape(r.name)}" time="{r.seconds:.3f}">')
        if not r.passed:
            lines.append(f'    <failure message="{escape(r.detail)}"/>')
        lines.append("  </testcase>")
    lines.append("</testsuite>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(prog="vltrack.docsbench")
    parser.add_argument("recipe", nargs="?", help="recipe name")
    parser.add_argument("--all", action="store_true")
    parser.add_argument("--list", action="store_true")
    parser.add_argument("--workdir")
    parser.add_argument("--junit", help="write a JUnit-style XML report")
    args = parser.parse_args(argv)

    recipes = load_recipes()
    if args.list:
        for name, recipe in sorted(recipes.items()):
            print(f"{name}: {recipe.description} (~{recipe.runtime_hint})")
        return 0
    names = sorted(recipes) if args.all else ([args.recipe] if args.recipe else [])
    if not names:
        parser.error("name a recipe, or use --all / --list")
    results = []
    for name in names:
        result = run_recipe(name, workdir=args.workdir)
        results.append(result)
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {name}: {result.detail} ({result.seconds:.1f}s)")
    if args.junit:
        write_junit(results, args.junit)
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
