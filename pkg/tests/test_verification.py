import numpy as np
import pytest

from gapprune import functional as F
from gapprune.model import Model
from gapprune.tensor import Tensor
from gapprune.verification import (
    finite_difference_check,
    mask_oracle_check,
    oracle_mask,
    oracle_prune_count,
    run_all,
)


def test_run_all_passes():
    reports = run_all(seed=0)
    assert len(reports) >= 10
    for report in reports:
        assert report.passed, report.line()
        assert report.line().startswith("PASS")


def test_model_check_meets_tolerance():
    model = Model("minicnn", (1, 16, 16), 10, seed=3)
    images = np.random.default_rng(3).uniform(0, 1, (4, 1, 16, 16))
    report = finite_difference_check(model, [images], np.array([0, 1, 2, 3]), tolerance=1e-4, seed=3)
    assert report.passed and report.max_rel_error <= 1e-4
    # probing leaves the original model untouched
    np.testing.assert_array_equal(model.state()["conv1.weight"], Model("minicnn", (1, 16, 16), 10, seed=3).state()["conv1.weight"])


def test_wrong_gradient_is_caught():
    def broken(x):
        # forward computes x*x but backward claims 3x
        return Tensor._from_op((x.data * x.data).sum(), (x,), lambda g: (3 * g * x.data,), "broken")

    report = finite_difference_check(broken, [np.linspace(0.5, 1.5, 6)], num_coords=6)
    assert not report.passed
    assert "arg0" in report.worst and report.line().startswith("FAIL")


def test_zero_input_gradients():
    report = finite_difference_check(lambda x: F.relu(x * 2.0 + 1.0).sum(), [np.zeros((3, 3))], tolerance=1e-6)
    assert report.passed


def test_prune_count_oracle():
    assert oracle_prune_count(10, 2) == 5
    assert oracle_prune_count(3, 2) == 2  # 1.5 rounds up
    assert oracle_prune_count(7, 1) == 0
    assert oracle_prune_count(7, 7) == 6
    assert oracle_mask([3, 1, 1, 2], 2) == [True, False, False, True]


@pytest.mark.parametrize("scope", ["global", "layerwise"])
def test_mask_oracle_agrees(scope):
    rng = np.random.default_rng(5)
    scores = {"a": rng.integers(0, 3, 11).astype(float), "b": rng.integers(0, 3, 4).astype(float)}
    assert mask_oracle_check(scores, scope).passed


def test_mask_oracle_flags_disagreement(monkeypatch):
    from gapprune import verification

    # an oracle that breaks ties by reverse index must disagree on tied scores
    monkeypatch.setattr(
        verification,
        "oracle_mask",
        lambda s, p: [i not in sorted(range(len(s)), key=lambda i: (s[i], -i))[: oracle_prune_count(len(s), p)] for i in range(len(s))],
    )
    report = mask_oracle_check(np.ones(6), compressions=[2])
    assert not report.passed and report.max_abs_error > 0 and "p=2" in report.worst
