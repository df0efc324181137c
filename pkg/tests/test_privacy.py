import dataclasses
import math

import numpy as np
import pytest

from dpsaddle.privacy import (
    ACCOUNTANT_CONSTANT,
    PrivacyBudget,
    PrivacyPreconditionError,
    calibrate_noisy_sgda,
    compose_parallel,
    gaussian_noise,
    output_perturbation_sigma,
    regularized_sensitivity,
)


def test_budget_validation():
    with pytest.raises(PrivacyPreconditionError):
        PrivacyBudget(-1.0, 1e-5)
    with pytest.raises(PrivacyPreconditionError):
        PrivacyBudget(1.0, 1.5)
    with pytest.raises(PrivacyPreconditionError):
        PrivacyBudget(float("inf"), 1e-5)
    assert PrivacyBudget.coerce((1, 1e-5)) == PrivacyBudget(1.0, 1e-5)


def test_plan_iterations_example():
    plan = calibrate_noisy_sgda(1024, 16, (1.0, 1e-5), L=1.0, D_hat=1.0)
    second = 1024**2 / (32 * 16 * math.log(1e5))
    assert second == pytest.approx(177.88, abs=0.01)
    assert plan.T == 128


def test_plan_quarter_batch_example():
    plan = calibrate_noisy_sgda(1024, 16, (1.0, 1e-5), L=1.0, D_hat=1.0, batch_rule="quarter")
    assert plan.m == math.floor(1024 * math.sqrt(1 / 512)) == 45
    assert plan.gradient_evaluations == 128 * 45
    ok, reasons = plan.check_preconditions()
    assert not ok and any("n^2 eps / m^2" in r for r in reasons)


def test_plan_default_batch_meets_step_condition():
    plan = calibrate_noisy_sgda(1024, 16, (1.0, 1e-5), L=1.0, D_hat=1.0)
    assert plan.m == 91
    assert plan.T >= 1024**2 / plan.m**2
    assert plan.preconditions_ok


def test_plan_sigma_and_eta_formulas():
    n, d, L, D = 2000, 4, 3.0, 0.5
    eps, delta = 0.5, 1e-6
    plan = calibrate_noisy_sgda(n, d, (eps, delta), L=L, D_hat=D)
    T = max(1, math.floor(min(n / 8, n**2 * eps**2 / (32 * d * math.log(1 / delta)))))
    assert plan.T == T
    assert plan.sigma == pytest.approx(ACCOUNTANT_CONSTANT * L * math.sqrt(T * math.log(1 / delta)) / (n * eps))
    assert plan.eta == pytest.approx(D / (L * math.sqrt(T)))


def test_plan_large_epsilon_is_nearly_noiseless():
    plan = calibrate_noisy_sgda(1024, 2, (1e6, 1e-5), L=1.0, D_hat=1.0)
    assert plan.sigma < 1e-6
    # the accountant assumes eps <= 1, so such a plan is not certified
    assert not plan.preconditions_ok


def test_plan_requires_n_at_least_8():
    with pytest.raises(PrivacyPreconditionError):
        calibrate_noisy_sgda(7, 2, (1.0, 1e-5), L=1.0, D_hat=1.0)


def test_plan_requires_positive_dhat():
    with pytest.raises(PrivacyPreconditionError):
        calibrate_noisy_sgda(100, 2, (1.0, 1e-5), L=1.0, D_hat=0.0)


def test_halved_sigma_fails_preconditions():
    plan = calibrate_noisy_sgda(4096, 8, (1.0, 1e-5), L=1.0, D_hat=1.0)
    broken = dataclasses.replace(plan, sigma=plan.sigma / 2)
    ok, reasons = broken.check_preconditions()
    assert not ok and any("floor" in r for r in reasons)


def test_output_perturbation_example():
    sigma = output_perturbation_sigma(1, 1.0, 100, (1.0, 0.1), 1.0)
    assert math.log(20) == pytest.approx(2.9957, abs=1e-4)
    assert sigma == pytest.approx(8 * math.sqrt(math.log(20)) / 200)
    assert sigma == pytest.approx(0.069233, abs=1e-6)


def test_output_perturbation_halves_with_t():
    a = output_perturbation_sigma(2, 0.3, 50, (1.0, 1e-5), 2.0)
    b = output_perturbation_sigma(3, 0.3, 50, (1.0, 1e-5), 2.0)
    assert b == pytest.approx(a / 2)


def test_output_perturbation_rejects_nonpositive_log():
    with pytest.raises(PrivacyPreconditionError):
        output_perturbation_sigma(1, 1.0, 10, (1.0, 2.0), 1.0)


def test_output_noise_energy():
    sigma, dim = 0.3, 6
    rng = np.random.default_rng(0)
    xi = gaussian_noise(rng, dim, sigma, size=10_000)
    energy = np.mean(np.sum(xi**2, axis=1))
    assert abs(energy - dim * sigma**2) <= 0.05 * dim * sigma**2


def test_gaussian_noise_reproducible():
    a = gaussian_noise(np.random.default_rng(5), 3, 1.0)
    b = gaussian_noise(np.random.default_rng(5), 3, 1.0)
    assert np.array_equal(a, b)


def test_compose_parallel_examples():
    assert compose_parallel([(1, 1e-5), (1, 1e-5)], True) == PrivacyBudget(1.0, 1e-5)
    assert compose_parallel([], True) == PrivacyBudget(0.0, 0.0)
    assert compose_parallel([(0.5, 1e-6), (1, 1e-5)], True) == PrivacyBudget(1.0, 1e-5)


def test_compose_parallel_needs_attestation():
    with pytest.raises(PrivacyPreconditionError):
        compose_parallel([(1, 1e-5)], False)


def test_regularized_sensitivity_examples():
    assert regularized_sensitivity(1.0, 1.0, 100) == pytest.approx(0.02)
    assert regularized_sensitivity(1.0, float("inf"), 100) == 0.0
    assert regularized_sensitivity(2.0, 0.5, 10) == pytest.approx(0.8)


def test_regularized_sensitivity_rejects_bad_inputs():
    with pytest.raises(ValueError):
        regularized_sensitivity(1.0, 0.0, 10)
    with pytest.raises(ValueError):
        regularized_sensitivity(1.0, 1.0, 0)
