"""Recipe loading, coverage of the acceptance criteria, and the runner."""

import json
import os

import pytest

from vltrack.config import Config
from vltrack.docsbench import (
    RECIPES_DIR,
    gradient_fidelity,
    load_recipes,
    micro_batch,
    run_recipe,
    write_junit,
)
from vltrack.errors import VLTrackError
from vltrack.pipeline import resolve_vocab


class TestRecipes:
    def test_recipes_load(self):
        recipes = load_recipes()
        assert {"gradcheck-all", "overfit-8", "twin-disambiguation", "determinism"} <= set(recipes)
        for recipe in recipes.values():
            assert recipe.commands and recipe.expected

    def test_every_acceptance_criterion_covered_exactly_once(self):
        recipes = load_recipes()
        coverage = {}
        for recipe in recipes.values():
            for criterion in recipe.criteria:
                coverage.setdefault(criterion, []).append(recipe.name)
        for criterion in range(1, 9):
            assert coverage.get(criterion, []), f"criterion {criterion} not covered"
            assert len(coverage[criterion]) == 1, f"criterion {criterion} covered by {coverage[criterion]}"

    def test_unknown_recipe_message_is_actionable(self):
        with pytest.raises(VLTrackError) as err:
            run_recipe("no-such-recipe")
        assert "available" in str(err.value)

    def test_missing_prerequisite_reports_actionably(self, tmp_path):
        # eval against a dataset that was never generated
        bad = {
            "name": "needs-input",
            "description": "x",
            "expected": "x",
            "commands": ["vltrack eval --data {work}/nowhere --ckpt {work}/none.aio --out {work}/r"],
            "check": {"kind": "exit-zero"},
        }
        rdir = tmp_path / "recipes"
        rdir.mkdir()
        (rdir / "needs-input.json").write_text(json.dumps(bad))
        result = run_recipe("needs-input", workdir=str(tmp_path / "w"), recipes_dir=str(rdir), quiet=True)
        assert not result.passed
        assert "generate" in result.detail

    def test_junit_report_shape(self, tmp_path):
        from vltrack.docsbench import RecipeResult

        path = tmp_path / "report.xml"
        write_junit([RecipeResult("a", True, "ok", 0.1), RecipeResult("b", False, "bad < thing", 0.2)], path)
        text = path.read_text()
        assert 'tests="2"' in text and 'failures="1"' in text
        assert "&lt;" in text  # detail is escaped


class TestGradientFidelityHarness:
    def test_micro_batch_shapes(self):
        cfg = Config().replace(batch_size=2)
        batch = micro_batch(cfg, resolve_vocab(cfg), n=2)
        assert batch.search.shape == (2, 3, 64, 64)
        assert batch.template.shape == (2, 3, 32, 32)
        assert batch.boxes.shape == (2, 4)

    def test_small_model_fidelity(self):
        cfg = Config().replace(dim=32, layers=1, heads=2, align_dim=16, head_channels="8,8,8")
        report = gradient_fidelity(cfg)
        assert set(report["losses"]) == {"cls", "giou", "l1", "cma", "ima", "total"}
        assert report["passed"], report
