import pytest
from pyharvim import GradientCheckException
from pyharvim.gradcheck import SUITES, SuiteResult, run_suites


def test_every_suite_passes_a_short_run():
    results = run_suites(cases=5, seed=3)
    assert [result.name for result in results] == list(SUITES)
    assert all(result.passed for result in results)
    assert all(result.cases >= 5 for result in results)


def test_selected_suites_only():
    (result,) = run_suites(["render"], cases=3)
    assert result.name == "render"


def test_unknown_suite_raises():
    with pytest.raises(GradientCheckException):
        run_suites(["hessian"])


def test_failures_are_reported():
    result = SuiteResult("demo")
    result.cases = 2
    result.failures.append("case#1: relative error 1.0e-02")
    assert not result.passed
    assert "demo" in str(result)


@pytest.mark.slow
def test_full_oracle_run():
    results = run_suites(cases=100)
    assert all(result.passed for result in results)
