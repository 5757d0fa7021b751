from __future__ import annotations

import json

import pytest

from aceprune.verify import FAULTS, CheckResult, run_battery


@pytest.fixture(scope="module")
def battery():
    return run_battery(seed=0)


def test_every_check_reports_its_size_and_error(battery):
    assert len(battery) == 16
    assert len({c.name for c in battery}) == len(battery)
    for c in battery:
        assert c.samples >= 1 and c.max_error >= 0.0 and c.tolerance >= 0.0
        assert isinstance(c.passed, bool)
        json.dumps(c.to_dict())


def test_only_the_lemma_convergence_claim_fails(battery):
    assert [c.name for c in battery if not c.passed] == ["lemma_quadratic_convergence"]


def test_battery_is_reproducible(battery):
    assert [c.to_dict() for c in run_battery(seed=0)] == [c.to_dict() for c in battery]


@pytest.mark.parametrize("seed", [1, 7])
def test_other_seeds_agree(seed):
    failed = [c.name for c in run_battery(seed=seed) if not c.passed]
    assert failed == ["lemma_quadratic_convergence"]


def test_sign_flip_is_caught():
    assert FAULTS == ("sign-flip",)
    failed = {c.name for c in run_battery(seed=0, fault="sign-flip") if not c.passed}
    assert {"metrics_vs_naive_loops", "masks_drop_lowest_scores"} <= failed


def test_unknown_fault_rejected():
    with pytest.raises(ValueError):
        run_battery(fault="bit-rot")


def test_non_finite_errors_serialise():
    d = CheckResult("x", 1, float("inf"), 0.0, False).to_dict()
    assert d["max_error"] == "inf" and d["passed"] is False
