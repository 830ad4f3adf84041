import itertools

import numpy as np
import pytest

from app.data.synthetic_data import random_factorized_model, random_markov_model
from app.diffusion.processes import NoiseDistribution, q_xt_given_x0
from app.diffusion.schedules import make_linear_alpha
from app.errors import ConfigError, ContractError
from app.models.base import validate_output
from app.models.model_utils import (
    ContextKind, DenoiserArch, TrainableDenoiser, context_matrix, timestep_encoding,
)
from app.models.oracle import DataModel, OracleDenoiser, oracle_predict


def _model(K=5, N_max=4, context_kind="window", seed=0, **kwargs):
    arch = DenoiserArch(K=K, N_max=N_max, embed_dim=4, time_dim=3, hidden_dim=6, context_kind=context_kind,
                        window=1, init_scale=0.3, **kwargs)
    return TrainableDenoiser(arch, rng=np.random.default_rng(seed))


def _cross_entropy(targets):
    def loss_fn(probs):
        rows = np.arange(len(targets))
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        return float(-np.log(probs[rows, targets]).sum()), grad
    return loss_fn


def test_validate_output():
    f = np.full((2, 3), 1 / 3)
    assert validate_output(f, 2, 3) is not None
    with pytest.raises(ContractError):
        validate_output(f, 3, 3)
    with pytest.raises(ContractError):
        validate_output(np.array([[0.5, 0.6, -0.1]]), 1, 3)
    with pytest.raises(ContractError):
        validate_output(np.array([[0.5, 0.4, 0.0]]), 1, 3)
    with pytest.raises(ContractError):
        validate_output(np.array([[np.nan, np.nan]]), 1, 2)


def test_oracle_unmasked_position_is_point_mass(rng):
    sched, noise = make_linear_alpha(10), NoiseDistribution.absorbing(6)
    model = random_factorized_model(6, 4, rng)
    tokens = np.array([5, 2, 5, 0])
    f = oracle_predict(model, tokens, 6, sched, noise)
    assert f[1].tolist() == [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
    assert f[3].tolist() == [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]


def test_oracle_masked_factorized_position_is_marginal(rng):
    sched, noise = make_linear_alpha(10), NoiseDistribution.absorbing(6)
    model = random_factorized_model(6, 4, rng)
    f = oracle_predict(model, np.array([5, 2, 5, 0]), 6, sched, noise)
    assert np.allclose(f[0], model.marginals[0], atol=1e-12, rtol=0)
    assert np.allclose(f[2], model.marginals[2], atol=1e-12, rtol=0)


def _brute_force_posterior(model, tokens, t, sched, noise):
    K, N = model.K, model.N
    out = np.zeros((N, K))
    for x0 in itertools.product(range(K), repeat=N):
        prior = model.initial[x0[0]] * np.prod([model.transition[a, b] for a, b in zip(x0, x0[1:])])
        like = np.prod([q_xt_given_x0(x0[n], t, sched, noise)[tokens[n]] for n in range(N)])
        for n in range(N):
            out[n, x0[n]] += prior * like
    return out / out.sum(axis=1, keepdims=True)


@pytest.mark.parametrize("kind", ["uniform", "absorbing"])
def test_markov_oracle_matches_enumeration(kind, rng):
    K, N = 4, 4
    sched = make_linear_alpha(6)
    noise = NoiseDistribution.uniform(K) if kind == "uniform" else NoiseDistribution.absorbing(K)
    model = random_markov_model(K, N, rng)
    for t in (1, 3, 5, 6):
        tokens = model.sample(1, rng)[0]
        keep = rng.random(N) < sched[t]
        tokens = np.where(keep, tokens, rng.choice(K, size=N, p=noise.probs))
        f = OracleDenoiser(model, sched, noise).predict(tokens, t)
        assert np.max(np.abs(f - _brute_force_posterior(model, tokens, t, sched, noise))) <= 1e-12


def test_data_model_config_round_trip(rng):
    for model in (random_factorized_model(5, 3, rng), random_markov_model(5, 3, rng)):
        restored = DataModel.from_config(model.to_config())
        assert restored.kind == model.kind
        assert np.allclose(restored.position_marginals(), model.position_marginals())
    with pytest.raises(ConfigError):
        DataModel.from_config({"kind": "hmm"})


def test_data_model_bigram_is_a_distribution(rng):
    model = random_markov_model(4, 5, rng)
    bigram = model.bigram()
    assert bigram.shape == (4, 4)
    assert bigram.sum() == pytest.approx(1.0)
    assert np.allclose(bigram.sum(axis=1), model.position_marginals()[:-1].mean(axis=0))


def test_timestep_encoding():
    assert timestep_encoding(3, 0).shape == (0,)
    enc = timestep_encoding(0, 5)
    assert enc.tolist() == [0.0, 0.0, 0.0, 1.0, 1.0]
    assert not np.allclose(timestep_encoding(2, 4), timestep_encoding(3, 4))


def test_context_matrix_rows_are_stochastic():
    for kind in ContextKind:
        m = context_matrix(5, kind, 1)
        assert np.allclose(m.sum(axis=1), 1.0)
    window = context_matrix(4, "window", 1)
    assert window[0].tolist() == [0.5, 0.5, 0.0, 0.0]


def test_forward_output_shape_and_rows():
    model = _model()
    f = model.forward(np.array([0, 4, 2]), 7, condition=np.array([1, 3]))
    validate_output(f, 3, 5)


def test_zero_output_head_is_uniform():
    model = _model()
    model.zero_output_head()
    f = model.predict(np.array([1, 2, 3, 4]), 2)
    assert np.allclose(f, 0.2, atol=1e-15, rtol=0)


def test_forward_rejects_bad_inputs():
    model = _model()
    with pytest.raises(ContractError):
        model.forward(np.array([0, 1, 2, 3, 4]), 1)
    with pytest.raises(ContractError):
        model.forward(np.array([0, 5]), 1)
    with pytest.raises(ContractError):
        model.forward(np.array([0, 1]), 1, condition=np.array([7]))
    with pytest.raises(ContractError):
        model.backward(np.array([0, 1]), 1, None, np.zeros((3, 5)))


def test_zero_upstream_gradient():
    model = _model()
    grad = model.backward(np.array([0, 1, 2]), 4, np.array([3, 3]), np.zeros((3, 5)))
    assert grad.shape == model.params.shape
    assert not grad.any()


def test_gradient_is_linear_in_upstream(rng):
    model = _model()
    tokens, cond = np.array([0, 4, 2, 1]), np.array([1, 2, 3])
    g1, g2 = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    combined = model.backward(tokens, 3, cond, 2.0 * g1 - 0.5 * g2)
    separate = 2.0 * model.backward(tokens, 3, cond, g1) - 0.5 * model.backward(tokens, 3, cond, g2)
    assert np.allclose(combined, separate, atol=1e-12, rtol=1e-10)


@pytest.mark.parametrize("context_kind,with_condition", [
    ("window", True), ("window", False), ("mean_pool", True),
])
def test_gradient_matches_finite_differences(context_kind, with_condition, rng):
    model = _model(context_kind=context_kind, seed=3)
    tokens = np.array([0, 4, 2, 4])
    cond = np.array([1, 2, 3, 0]) if with_condition else None
    loss_fn = _cross_entropy(np.array([1, 3, 3, 0]))
    _, grad = model.value_and_grad(tokens, 5, cond, loss_fn)

    eps = 1e-5
    for i in rng.choice(model.params.size, size=150, replace=False):
        plus, minus = model.params.copy(), model.params.copy()
        plus[i] += eps
        minus[i] -= eps
        up, _ = loss_fn(model.with_params(plus).forward(tokens, 5, cond))
        down, _ = loss_fn(model.with_params(minus).forward(tokens, 5, cond))
        numeric = (up - down) / (2 * eps)
        assert abs(numeric - grad[i]) <= 1e-4 * max(abs(numeric), abs(grad[i]), 1e-5)


def test_condition_gradient_only_when_conditioned():
    model = _model()
    grad = model.backward(np.array([0, 1]), 2, None, np.arange(10.0).reshape(2, 5))
    views = TrainableDenoiser._views(model.arch, grad)
    assert not views["cond_embed"].any()
    assert not views["cond_mix"].any()


def test_arch_dict_round_trip():
    model = _model()
    restored = TrainableDenoiser.from_arch_dict(model.arch.model_dump(mode="json"), model.params.tolist())
    assert np.array_equal(restored.params, model.params)
    with pytest.raises(ConfigError):
        TrainableDenoiser.from_arch_dict({"K": 1, "N_max": 3}, None)
    with pytest.raises(ContractError):
        TrainableDenoiser(model.arch, params=np.zeros(3))
