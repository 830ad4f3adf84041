"""
Brute-force oracles and statistical tests for the diffusion identities.

Deterministic checks report the largest deviation found against a fixed
tolerance. Statistical checks report max(statistic / critical value) over their
sub-tests against a tolerance of 1.0, so `passed` always means
max_error <= tolerance.
"""
import itertools
import logging
import math
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, TypeAdapter
from scipy import stats

from app.data.synthetic_data import random_factorized_model
from app.diffusion import processes
from app.diffusion.processes import NoiseDistribution, kl_divergence, total_variation
from app.diffusion.sampler import (
    CoefficientProvider, DecodeMode, DiffusionState, RoutingDecision, RoutingStrategy, denoise_step,
    predict_tokens, route_stochastic, transition_kernel,
)
from app.diffusion.schedules import AlphaSchedule, RoutingCoefficients, lambda2, make_linear_alpha
from app.errors import ConfigError
from app.models.model_utils import DenoiserArch, TrainableDenoiser
from app.models.oracle import OracleDenoiser
from app.training.objectives import loss_simple
from config import config

logger = logging.getLogger(__name__)

K_RANGE = tuple(range(2, 9))
T_VALUES = (2, 4, 6)
CUSTOM_NOISE_SEEDS = (11, 12, 13)


class CheckReport(BaseModel):
    name: str
    passed: bool
    max_error: float
    tolerance: float
    cases_run: int = Field(ge=0)
    statistical: bool = False
    details: Dict[str, float] = {}

    @classmethod
    def from_errors(cls, name: str, max_error: float, tolerance: float, cases_run: int,
                    statistical: bool = False, details: Optional[Dict[str, float]] = None) -> "CheckReport":
        return cls(name=name, passed=bool(max_error <= tolerance), max_error=float(max_error),
                   tolerance=tolerance, cases_run=cases_run, statistical=statistical, details=details or {})


REPORT_ADAPTER = TypeAdapter(List[CheckReport])


def report_schema() -> dict:
    return REPORT_ADAPTER.json_schema()


def noise_family(K: int) -> List[NoiseDistribution]:
    noises = [NoiseDistribution.uniform(K), NoiseDistribution.absorbing(K)]
    for seed in CUSTOM_NOISE_SEEDS:
        noises.append(NoiseDistribution.custom(np.random.default_rng(seed * 100 + K).dirichlet(np.ones(K))))
    return noises


def sweep(K_values: Sequence[int] = K_RANGE, T_values: Sequence[int] = T_VALUES,
          noise_factory: Callable[[int], List[NoiseDistribution]] = noise_family
          ) -> Iterator[Tuple[AlphaSchedule, NoiseDistribution, int, int]]:
    """Every (schedule, noise, s, t) with 0 <= s < t <= T."""
    for T in T_values:
        sched = make_linear_alpha(T)
        for K in K_values:
            for noise in noise_factory(K):
                for s, t in itertools.combinations(range(T + 1), 2):
                    yield sched, noise, s, t


def possible_pairs(sched: AlphaSchedule, noise: NoiseDistribution, t: int) -> Tuple[np.ndarray, np.ndarray]:
    """All (x_t, x0) with q(x_t | x0) > 0, flattened."""
    x_t, x0 = np.meshgrid(np.arange(noise.K), np.arange(noise.K), indexing="ij")
    x_t, x0 = x_t.ravel(), x0.ravel()
    mass = sched[t] * (x_t == x0) + (1.0 - sched[t]) * noise.probs[x_t]
    keep = mass > 0.0
    return x_t[keep], x0[keep]


def check_branch_form(K_values=K_RANGE, T_values=T_VALUES, tolerance=config.EXACT_TOLERANCE) -> CheckReport:
    """Branching backward form against Bayes enumeration."""
    worst, cases = 0.0, 0
    for sched, noise, s, t in sweep(K_values, T_values):
        for x_t, x0 in zip(*possible_pairs(sched, noise, t)):
            branch = processes.backward_branch(int(x_t), int(x0), s, t, sched, noise)
            bayes = processes.backward_bayes(int(x_t), int(x0), s, t, sched, noise)
            worst = max(worst, total_variation(branch, bayes))
            cases += 1
    return CheckReport.from_errors("branch_form", worst, tolerance, cases)


def _routing_outcomes(coeffs: RoutingCoefficients, N: int):
    lam1 = np.broadcast_to(coeffs.lambda1, (N,))
    for v1, v2 in itertools.product((False, True), repeat=2):
        weight = (lam1 if v1 else 1.0 - lam1) * (coeffs.lambda2 if v2 else 1.0 - coeffs.lambda2)
        yield RoutingDecision(v1=np.full(N, v1), v2=np.full(N, v2)), weight


def check_reparam_marginal(K_values=K_RANGE, T_values=T_VALUES, tolerance=config.EXACT_TOLERANCE) -> CheckReport:
    """Marginalize the two-step routed construction over v and compare with Bayes enumeration."""
    worst, cases = 0.0, 0
    for sched, noise, s, t in sweep(K_values, T_values):
        x_t, x0 = possible_pairs(sched, noise, t)
        N = len(x_t)
        state = DiffusionState(tokens=x_t, denoised=x_t == x0, t=t, scores=np.zeros(N))
        provider = CoefficientProvider(sched, noise)
        coeffs = provider.coefficients(s, t, x_t, state.denoised)
        mixture = np.zeros((N, noise.K))
        for v, weight in _routing_outcomes(coeffs, N):
            mixture += weight[:, None] * transition_kernel(state, x0, v, s, provider)
        for n in range(N):
            bayes = processes.backward_bayes(int(x_t[n]), int(x0[n]), s, t, sched, noise)
            worst = max(worst, total_variation(mixture[n], bayes))
        cases += N
    return CheckReport.from_errors("reparam_marginal", worst, tolerance, cases)


def routed_kl_loss(f: np.ndarray, x0_seq: np.ndarray, xt_seq: np.ndarray, t: int, sched: AlphaSchedule,
                   noise: NoiseDistribution) -> float:
    """sum_n E_q(v)[KL(q(x_{t-1} | v, x_t, x0) || p(x_{t-1} | v, x_t))] with b set from the true x0."""
    s = t - 1
    provider = CoefficientProvider(sched, noise)
    denoised = xt_seq == x0_seq
    coeffs = provider.coefficients(s, t, xt_seq, denoised)
    lam1 = np.broadcast_to(coeffs.lambda1, (len(x0_seq),))
    fallback = provider.noise_rows(xt_seq, s, t)
    eye = np.eye(noise.K)
    total = 0.0
    for n in range(len(x0_seq)):
        if denoised[n]:
            branches = [(lam1[n], eye[xt_seq[n]], eye[xt_seq[n]]),
                        (1.0 - lam1[n], noise.probs, noise.probs)]
        else:
            branches = [(coeffs.lambda2, eye[x0_seq[n]], f[n]),
                        (1.0 - coeffs.lambda2, fallback[n], fallback[n])]
        total += sum(w * kl_divergence(q, p) for w, q, p in branches if w > 0.0)
    return total


def check_loss_equivalence(cases_per_noise: int = 1000, seed: int = 0,
                           tolerance=config.LOSS_TOLERANCE) -> CheckReport:
    """Reweighted cross-entropy against the expected routed KL divergence."""
    rng = np.random.default_rng(seed)
    worst, cases = 0.0, 0
    for kind in ("uniform", "absorbing"):
        for _ in range(cases_per_noise):
            K = int(rng.integers(3, 9))
            T = int(rng.choice(T_VALUES))
            N = int(rng.integers(1, 7))
            t = int(rng.integers(1, T + 1))
            sched = make_linear_alpha(T)
            noise = NoiseDistribution.uniform(K) if kind == "uniform" else NoiseDistribution.absorbing(K)
            x0 = rng.integers(0, K - 1, size=N)
            xt = processes.corrupt(x0, t, sched, noise, rng)
            f = rng.dirichlet(np.ones(K), size=N)
            report, _ = loss_simple(f, x0, xt, t, "original", sched, label_smoothing=0.0)
            worst = max(worst, abs(report.loss - routed_kl_loss(f, x0, xt, t, sched, noise)))
            cases += 1
    return CheckReport.from_errors("loss_equivalence", worst, tolerance, cases)


def check_chain_consistency(K_values=K_RANGE, T_values=T_VALUES, tolerance=config.EXACT_TOLERANCE) -> CheckReport:
    """sum over x_t of q(x_s | x_t, x0) q(x_t | x0) must equal q(x_s | x0)."""
    worst, cases = 0.0, 0
    for sched, noise, s, t in sweep(K_values, T_values):
        for x0 in range(noise.K):
            forward = processes.q_xt_given_x0(x0, t, sched, noise)
            composed = np.zeros(noise.K)
            for x_t in np.flatnonzero(forward > 0.0):
                composed += forward[x_t] * processes.backward_bayes(int(x_t), x0, s, t, sched, noise)
            worst = max(worst, total_variation(composed, processes.q_xt_given_x0(x0, s, sched, noise)))
            cases += 1
    return CheckReport.from_errors("chain_consistency", worst, tolerance, cases)


def _two_step_schedule(alpha_s: float, alpha_t: float) -> AlphaSchedule:
    return AlphaSchedule(T=2, alpha=np.array([1.0, alpha_s, alpha_t]))


def check_multinomial_degeneracy(K: int = 10000, alphas=(0.995, 0.99), small_alphas=(0.05, 0.01),
                                 tolerance=config.EXACT_TOLERANCE) -> CheckReport:
    """
    The vanilla multinomial kernel almost always copies x_t when alpha is near 1;
    the routed kernel still sends half the mass of a noisy token to x0.
    """
    noise = NoiseDistribution.uniform(K)
    f = np.full(K, 1.0 / K)
    x_t = 1
    violations = {}

    sched = _two_step_schedule(*alphas)
    vanilla_copy = processes.vanilla_backward_multinomial(f, x_t, 2, sched, K)[x_t]
    violations["vanilla_copy_below_0.99"] = max(0.0, 0.99 - vanilla_copy)

    lam2 = lambda2(sched, 1, 2)
    violations["denoise_prob_off_0.5"] = abs(lam2 - 0.5)

    provider = CoefficientProvider(sched, noise)
    state = DiffusionState(tokens=np.array([x_t]), denoised=np.array([False]), t=2, scores=np.zeros(1))
    x0_tilde = predict_tokens(f[None, :], 1.0, DecodeMode.ARGMAX, np.random.default_rng(0))
    routed = sum(
        weight[0] * transition_kernel(state, x0_tilde, v, 1, provider)[0]
        for v, weight in _routing_outcomes(provider.coefficients(1, 2, state.tokens, state.denoised), 1)
    )
    violations["routed_copy_not_below_0.99"] = max(0.0, routed[x_t] - 0.99 + tolerance)

    small = _two_step_schedule(*small_alphas)
    small_copy = processes.vanilla_backward_multinomial(f, x_t, 2, small, K)[x_t]
    violations["small_alpha_copy_not_below_0.5"] = max(0.0, small_copy - 0.5 + tolerance)

    details = {"vanilla_copy": float(vanilla_copy), "routed_copy": float(routed[x_t]),
               "lambda2": float(lam2), "small_alpha_copy": float(small_copy)}
    return CheckReport.from_errors("multinomial_degeneracy", max(violations.values()), tolerance, 4, details=details)


def chi_square_ratio(samples: np.ndarray, probs: np.ndarray, alpha: float) -> float:
    """Chi-square statistic over its critical value; inf if a zero-probability outcome occurred."""
    probs = np.asarray(probs, dtype=np.float64)
    observed = np.bincount(np.asarray(samples, dtype=np.int64), minlength=len(probs)).astype(np.float64)
    support = probs > 0.0
    if observed[~support].sum() > 0:
        return math.inf
    if support.sum() < 2:
        return 0.0
    expected = probs[support] * observed.sum()
    statistic = stats.chisquare(observed[support], expected).statistic
    return float(statistic / stats.chi2.ppf(1.0 - alpha, int(support.sum()) - 1))


class ConstantDenoiser:
    """Returns the same Categorical at every position."""

    def __init__(self, f):
        self.f = np.asarray(f, dtype=np.float64)
        self.K = len(self.f)

    def predict(self, tokens, t, condition=None):
        return np.tile(self.f, (len(tokens), 1))


def check_sampler_statistics(draws: int = config.VERIFY_DRAWS, seed: int = 0,
                             significance: float = config.SIGNIFICANCE) -> CheckReport:
    rng = np.random.default_rng(seed)
    K, T = 4, 4
    sched = make_linear_alpha(T)
    noise = NoiseDistribution.custom([0.1, 0.2, 0.3, 0.4])
    provider = CoefficientProvider(sched, noise)
    f = np.array([0.5, 0.1, 0.15, 0.25])
    tests: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    x0 = 1
    tests["corrupt"] = (processes.corrupt(np.full(draws, x0), 2, sched, noise, rng),
                        processes.q_xt_given_x0(x0, 2, sched, noise))

    state = DiffusionState(tokens=np.zeros(draws, dtype=np.int64), denoised=np.zeros(draws, dtype=bool),
                           t=2, scores=np.zeros(draws))
    v = route_stochastic(state, RoutingCoefficients(lambda1=0.3, lambda2=0.6), rng)
    tests["route_v1"] = (v.v1.astype(np.int64), np.array([0.7, 0.3]))
    tests["route_v2"] = (v.v2.astype(np.int64), np.array([0.4, 0.6]))

    for tau in (1.0, 0.5):
        tempered = np.exp(np.log(f) / tau)
        tests[f"predict_x0_tau{tau}"] = (predict_tokens(np.tile(f, (draws, 1)), tau, DecodeMode.SAMPLE, rng),
                                         tempered / tempered.sum())

    denoiser = ConstantDenoiser(f)
    s, t, x_t = 1, 3, 2
    for clean in (False, True):
        state = DiffusionState(tokens=np.full(draws, x_t), denoised=np.full(draws, clean), t=t,
                               scores=np.zeros(draws))
        after = denoise_step(state, denoiser, RoutingStrategy.stochastic(), provider, 1.0, DecodeMode.SAMPLE, s, rng)
        coeffs = provider.coefficients(s, t, np.array([x_t]), np.array([clean]))
        if clean:
            lam1 = float(np.asarray(coeffs.lambda1).ravel()[0])
            expected = lam1 * np.eye(K)[x_t] + (1.0 - lam1) * noise.probs
        else:
            expected = coeffs.lambda2 * f + (1.0 - coeffs.lambda2) * provider.noise_rows(np.array([x_t]), s, t)[0]
        tests[f"denoise_step_b{int(clean)}"] = (after.tokens, expected)

    # Bonferroni across sub-tests
    alpha = significance / len(tests)
    ratios = {name: chi_square_ratio(samples, probs, alpha) for name, (samples, probs) in tests.items()}
    return CheckReport.from_errors("sampler_statistics", max(ratios.values()), 1.0, draws * len(tests),
                                   statistical=True, details=ratios)


def _conditioned_losses(model, oracle, sched, noise, rng, draws, scheme="linear"):
    rows = model.sample(draws, rng)
    coupled = np.zeros(draws)
    independent = np.zeros(draws)

    def loss_at(x0, xt, t):
        report, _ = loss_simple(oracle.predict(xt, t), x0, xt, t, scheme, sched, 0.0)
        return report.loss

    for i in range(draws):
        x0 = rows[i]
        s, t = sorted(int(v) for v in rng.integers(1, sched.T + 1, size=2))
        xt = processes.corrupt(x0, t, sched, noise, rng)
        xs = (processes.sample_backward(xt, x0, s, t, sched, noise, rng) if s < t
              else processes.corrupt(x0, s, sched, noise, rng))
        coupled[i] = 0.5 * (loss_at(x0, xs, s) + loss_at(x0, xt, t))

        a, b = (int(v) for v in rng.integers(1, sched.T + 1, size=2))
        independent[i] = 0.5 * (loss_at(x0, processes.corrupt(x0, a, sched, noise, rng), a)
                                + loss_at(x0, processes.corrupt(x0, b, sched, noise, rng), b))
    return coupled, independent


def check_conditioned_unbiased(draws: int = config.VERIFY_DRAWS, seed: int = 0, K: int = 6, N: int = 4,
                               T: int = 6) -> CheckReport:
    """Coupled and independent two-view loss estimators must share their mean."""
    rng = np.random.default_rng(seed)
    sched = make_linear_alpha(T)
    noise = NoiseDistribution.absorbing(K)
    model = random_factorized_model(K, N, rng)
    coupled, independent = _conditioned_losses(model, OracleDenoiser(model, sched, noise), sched, noise, rng, draws)

    se = math.sqrt(coupled.var(ddof=1) / draws + independent.var(ddof=1) / draws)
    diff = abs(coupled.mean() - independent.mean())
    ratio = diff / (3.0 * se) if se > 0 else (0.0 if diff == 0 else math.inf)
    details = {"coupled_mean": float(coupled.mean()), "independent_mean": float(independent.mean()),
               "coupled_var": float(coupled.var(ddof=1)), "independent_var": float(independent.var(ddof=1))}
    return CheckReport.from_errors("conditioned_unbiased", ratio, 1.0, draws, statistical=True, details=details)


def default_gradient_model(seed: int = 0) -> TrainableDenoiser:
    arch = DenoiserArch(K=8, N_max=6, init_scale=0.3)
    return TrainableDenoiser(arch, rng=np.random.default_rng(seed))


def check_gradients(model: Optional[TrainableDenoiser] = None, n_checked: int = 2000, seed: int = 0,
                    step: float = config.FD_STEP, tolerance: float = config.GRAD_TOLERANCE,
                    floor: float = 1e-5) -> CheckReport:
    """Analytic gradient of the label-smoothed loss against central finite differences."""
    rng = np.random.default_rng(seed)
    model = model if model is not None else default_gradient_model(seed)
    K, N = model.K, model.arch.N_max
    sched = make_linear_alpha(10)
    noise = NoiseDistribution.absorbing(K)

    batch = []
    for _ in range(2):
        x0 = rng.integers(0, K - 1, size=N)
        t = int(rng.integers(5, 11))
        xt = processes.corrupt(x0, t, sched, noise, rng)
        batch.append((x0, xt, t, rng.integers(0, K - 1, size=N)))

    def total_loss(with_grad: bool):
        loss, grad = 0.0, np.zeros_like(model.params)
        for x0, xt, t, cond in batch:
            def loss_fn(f, x0=x0, xt=xt, t=t):
                report, grad_logits = loss_simple(f, x0, xt, t, "linear", sched, label_smoothing=0.1)
                return report.loss, grad_logits
            if with_grad:
                value, g = model.value_and_grad(xt, t, cond, loss_fn)
                grad += g
            else:
                value = loss_fn(model.forward(xt, t, cond))[0]
            loss += value
        return loss, grad

    _, analytic = total_loss(with_grad=True)
    index = rng.choice(model.params.size, size=min(n_checked, model.params.size), replace=False)
    worst = 0.0
    for j in index:
        original = model.params[j]
        model.params[j] = original + step
        plus = total_loss(with_grad=False)[0]
        model.params[j] = original - step
        minus = total_loss(with_grad=False)[0]
        model.params[j] = original
        numeric = (plus - minus) / (2.0 * step)
        worst = max(worst, abs(analytic[j] - numeric) / max(abs(analytic[j]), abs(numeric), floor))
    return CheckReport.from_errors("gradients", worst, tolerance, len(index))


CHECKS = {
    "branch_form": check_branch_form,
    "reparam_marginal": check_reparam_marginal,
    "loss_equivalence": check_loss_equivalence,
    "chain_consistency": check_chain_consistency,
    "multinomial_degeneracy": check_multinomial_degeneracy,
    "sampler_statistics": check_sampler_statistics,
    "conditioned_unbiased": check_conditioned_unbiased,
    "gradients": check_gradients,
}
STATISTICAL_CHECKS = ("sampler_statistics", "conditioned_unbiased")


def run_suite(scope: Optional[Sequence[str]] = None, draws: int = config.VERIFY_DRAWS, seed: int = 0,
              significance: float = config.SIGNIFICANCE) -> List[CheckReport]:
    names = list(CHECKS) if not scope else list(scope)
    unknown = [name for name in names if name not in CHECKS]
    if unknown:
        raise ConfigError(f"Unknown checks: {', '.join(unknown)}")
    n_statistical = max(sum(name in STATISTICAL_CHECKS for name in names), 1)

    reports = []
    for name in names:
        if name == "sampler_statistics":
            report = check_sampler_statistics(draws=draws, seed=seed, significance=significance / n_statistical)
        elif name == "conditioned_unbiased":
            report = check_conditioned_unbiased(draws=draws, seed=seed)
        elif name == "gradients":
            report = check_gradients(seed=seed)
        else:
            report = CHECKS[name]()
        logger.info(f"{report.name}: {'PASS' if report.passed else 'FAIL'} "
                    f"(max_error={report.max_error:.3e}, tolerance={report.tolerance:.1e}, cases={report.cases_run})")
        reports.append(report)
    return reports


def format_reports(reports: List[CheckReport]) -> str:
    frame = pd.DataFrame([r.model_dump(exclude={"details"}) for r in reports])
    return frame.to_string(index=False)
