import math

import numpy as np
import pytest

from app.diffusion import processes
from app.errors import ConfigError
from app.models.model_utils import DenoiserArch, TrainableDenoiser
from app.verify.checks import (
    CHECKS, REPORT_ADAPTER, CheckReport, check_chain_consistency, check_conditioned_unbiased, check_gradients,
    check_loss_equivalence, check_multinomial_degeneracy, check_branch_form, check_reparam_marginal,
    check_sampler_statistics, chi_square_ratio, format_reports, report_schema, run_suite,
)

SMALL_K = (2, 3, 5, 8)


def test_check_report_pass_rule():
    assert CheckReport.from_errors("x", 1e-13, 1e-12, 3).passed
    assert not CheckReport.from_errors("x", 2e-12, 1e-12, 3).passed
    assert not CheckReport.from_errors("x", math.nan, 1e-12, 3).passed
    assert not CheckReport.from_errors("x", math.inf, 1.0, 3, statistical=True).passed


def test_branch_form_passes():
    report = check_branch_form(K_values=SMALL_K)
    assert report.passed, report
    assert report.max_error <= 1e-12
    assert report.cases_run > 0


def test_reparam_marginal_passes():
    assert check_reparam_marginal(K_values=SMALL_K).passed


def test_loss_equivalence_passes():
    report = check_loss_equivalence(cases_per_noise=100)
    assert report.passed, report
    assert report.tolerance == 1e-10


def test_chain_consistency_passes():
    assert check_chain_consistency(K_values=SMALL_K).passed


def test_chain_consistency_is_independent_of_branch_form(monkeypatch):
    def broken(*args, **kwargs):
        raise AssertionError("chain consistency must not use the branch form")

    monkeypatch.setattr(processes, "backward_branch", broken)
    assert check_chain_consistency(K_values=(2, 4), T_values=(4,)).passed


def test_multinomial_degeneracy():
    report = check_multinomial_degeneracy()
    assert report.passed
    assert report.details["vanilla_copy"] >= 0.99
    assert report.details["lambda2"] == pytest.approx(0.5, abs=1e-12)
    assert report.details["routed_copy"] < 0.99
    assert report.details["small_alpha_copy"] < 0.5


def test_sampler_statistics_pass():
    report = check_sampler_statistics(draws=20_000, seed=3)
    assert report.statistical
    assert report.passed, report.details


def test_conditioned_training_is_unbiased():
    report = check_conditioned_unbiased(draws=4000, seed=1)
    assert report.passed, report.details
    assert report.details["coupled_var"] > 0.0


def test_gradients_pass():
    arch = DenoiserArch(K=6, N_max=4, embed_dim=6, time_dim=4, hidden_dim=8, init_scale=0.3)
    report = check_gradients(TrainableDenoiser(arch, rng=np.random.default_rng(2)), n_checked=300)
    assert report.passed, report
    assert report.cases_run == 300


def test_branch_form_catches_wrong_lambda2(monkeypatch):
    def shifted(sched, s, t):
        return 0.9 * (sched[s] - sched[t]) / (1.0 - sched[t])

    monkeypatch.setattr(processes, "lambda2", shifted)
    report = check_branch_form(K_values=(3,), T_values=(4,))
    assert not report.passed
    assert report.max_error > 1e-3


def test_chi_square_ratio():
    probs = np.array([0.5, 0.5, 0.0])
    assert chi_square_ratio(np.array([0, 1, 2]), probs, 0.001) == math.inf
    assert chi_square_ratio(np.array([0, 1] * 500), probs, 0.001) == 0.0
    assert chi_square_ratio(np.zeros(100, dtype=int), probs, 0.001) > 1.0


def test_run_suite_rejects_unknown_checks():
    with pytest.raises(ConfigError):
        run_suite(["branch_form", "bleu"])


def test_run_suite_scope_and_report_schema():
    reports = run_suite(["multinomial_degeneracy", "sampler_statistics"], draws=20_000, seed=0)
    assert [r.name for r in reports] == ["multinomial_degeneracy", "sampler_statistics"]
    assert all(r.passed for r in reports)

    documents = [r.model_dump() for r in reports]
    assert len(REPORT_ADAPTER.validate_python(documents)) == 2
    schema = report_schema()
    assert schema["type"] == "array"
    assert "max_error" in schema["$defs"]["CheckReport"]["properties"]
    table = format_reports(reports)
    assert "multinomial_degeneracy" in table and "details" not in table


def test_every_check_is_registered():
    assert set(CHECKS) == {"branch_form", "reparam_marginal", "loss_equivalence", "chain_consistency",
                           "multinomial_degeneracy", "sampler_statistics", "conditioned_unbiased", "gradients"}
