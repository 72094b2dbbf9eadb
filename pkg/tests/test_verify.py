"""
Tests for the oracle verification suites.
"""

import json
import math

import pytest

from nrlg.errors import DomainError
from nrlg.verify import (
    SUITES,
    CheckResult,
    SuiteResult,
    determinism,
    gaussian_marginal,
    jacobian_assumption,
    mmse_optimality,
    run_suite,
    run_suites,
    svd_equivalence,
    unguided_sanity,
    write_report,
)


class TestSuites:
    """Suites that are cheap enough to run in the test session."""

    def test_registry(self):
        assert list(SUITES) == [
            "fd_gradient",
            "svd_equivalence",
            "jacobian_assumption",
            "gaussian_marginal",
            "mmse_optimality",
            "posterior_recovery",
            "determinism",
            "ablation_direction",
            "unguided_sanity",
        ]

    def test_jacobian_assumption(self):
        result = jacobian_assumption()
        assert result.passed, [c for c in result.checks if not c.passed]
        assert len(result.checks) == 12

    def test_svd_equivalence(self):
        result = svd_equivalence(trials=3)
        assert result.passed, [c for c in result.checks if not c.passed]

    def test_determinism(self):
        result = determinism()
        assert result.passed
        assert "dd_nrlg zeta=0 ignores step reseeding" in [c.name for c in result.checks]

    def test_mmse_optimality(self):
        result = mmse_optimality()
        assert result.passed, [c for c in result.checks if not c.passed]
        assert [c.name for c in result.checks] == [
            "delta_+0.01", "delta_-0.01", "delta_+0.1", "delta_-0.1", "sign_0.5",
        ]

    def test_unguided_sanity(self):
        """DDPM draws match the prior mean and variance for both lab priors."""
        result = unguided_sanity()
        assert result.passed, [c for c in result.checks if not c.passed]
        assert [c.name for c in result.checks] == [
            "ddpm mean N(0.5, 0.01)",
            "ddpm variance N(0.5, 0.01)",
            "ddpm mean N(0.5, 1.0)",
            "ddpm variance N(0.5, 1.0)",
            "ddim zeta=0 deterministic",
        ]

    def test_gaussian_marginal_shape(self):
        result = gaussian_marginal(draws=20_000, tuples=3)
        assert [c.name for c in result.checks] == [
            "mean #0", "variance #0", "mean #1", "variance #1", "mean #2", "variance #2",
        ]
        assert all(abs(c.value) < 6 for c in result.checks)

    def test_run_suite_times(self):
        result = run_suite("determinism", seed=3)
        assert result.name == "determinism"
        assert result.duration > 0

    def test_unknown_suite(self):
        with pytest.raises(DomainError):
            run_suite("nope")
        with pytest.raises(DomainError):
            run_suites(["determinism", "nope"])


class TestReport:
    """Test result records and the JSON report."""

    def test_non_finite_values_serialize(self):
        check = CheckResult("x", False, value=math.inf, threshold=None)
        assert check.to_dict()["value"] == "inf"
        assert CheckResult("y", True).to_dict()["value"] == "nan"

    def test_suite_passes_only_when_all_checks_pass(self):
        suite = SuiteResult("demo")
        suite.add("a", True, 0.1, 1.0)
        assert suite.passed
        suite.add("b", False, 2.0, 1.0)
        assert not suite.passed
        assert SuiteResult("empty").passed

    def test_write_report(self, tmp_path):
        ok = SuiteResult("ok")
        ok.add("a", True, 0.0)
        bad = SuiteResult("bad")
        bad.add("b", False, math.inf)
        path = write_report(tmp_path / "out" / "verify.json", [ok, bad])
        data = json.loads(path.read_text())
        assert data["passed"] is False
        assert [s["name"] for s in data["suites"]] == ["ok", "bad"]
        assert data["suites"][1]["checks"][0]["value"] == "inf"
