import numpy as np
import pytest
from scipy.special import softmax
from scipy.stats import chisquare

from app.data.synthetic_data import Corpus, generate_corpus, random_factorized_model
from app.diffusion.processes import NoiseDistribution, q_xt_given_x0, total_variation
from app.diffusion.sampler import CoefficientProvider, RoutingStrategy, sample
from app.diffusion.schedules import make_linear_alpha
from app.errors import ConfigError, ContractError, DivergenceError
from app.models.model_utils import DenoiserArch, TrainableDenoiser
from app.models.oracle import OracleDenoiser
from app.training import trainer as trainer_module
from app.training.objectives import (
    Batch, batch_loss, heldout_cross_entropy, loss_simple, make_batch, make_conditioned_batch, negative_elbo,
)
from app.training.trainer import TrainConfig, Trainer, ema_update, inverse_sqrt_factor, train
from app.verify.checks import ConstantDenoiser


def _small_model(K, N, seed=0):
    arch = DenoiserArch(K=K, N_max=N, embed_dim=8, time_dim=4, hidden_dim=16, init_scale=0.1)
    return TrainableDenoiser(arch, rng=np.random.default_rng(seed))


def _factorized(K=6, N=5, count=200, seed=0):
    corpus, model = generate_corpus("factorized", K, N, count, seed)
    return corpus, model


def test_loss_simple_example(linear4):
    # original weight at t=2 of the linear T=4 schedule is 0.5
    report, grad = loss_simple(np.array([[0.8, 0.2]]), [0], [1], 2, "original", linear4)
    assert report.loss == pytest.approx(-0.5 * np.log(0.8), abs=1e-15)
    assert report.loss == pytest.approx(0.111571, abs=1e-6)
    assert report.weight == pytest.approx(0.5)
    assert report.mask.tolist() == [False]
    assert np.allclose(grad, 0.5 * np.array([[-0.2, 0.2]]))


def test_loss_simple_clean_positions_cost_nothing(linear4, rng):
    f = rng.dirichlet(np.ones(4), size=3)
    report, grad = loss_simple(f, [0, 1, 2], [0, 1, 2], 3, "linear", linear4, label_smoothing=0.1)
    assert report.loss == 0.0
    assert not grad.any()
    assert report.mask.all()


def test_loss_simple_linear_weight_at_first_step():
    report, _ = loss_simple(np.array([[0.5, 0.5]]), [0], [1], 1, "linear", make_linear_alpha(10))
    assert report.weight == 1.0


def test_loss_simple_rejects_mismatched_lengths(linear4):
    with pytest.raises(ContractError):
        loss_simple(np.full((2, 2), 0.5), [0, 1], [1], 2, "linear", linear4)
    with pytest.raises(ConfigError):
        loss_simple(np.full((1, 2), 0.5), [0], [1], 2, "linear", linear4, label_smoothing=1.0)


def test_loss_simple_gradient_matches_finite_differences(linear4, rng):
    logits = rng.normal(size=(4, 5))
    x0, xt = np.array([0, 1, 2, 3]), np.array([0, 4, 4, 1])

    def loss_at(z):
        return loss_simple(softmax(z, axis=1), x0, xt, 3, "original", linear4, label_smoothing=0.1)

    _, grad = loss_at(logits)
    eps = 1e-6
    for i, j in np.ndindex(*logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[i, j] += eps
        minus[i, j] -= eps
        numeric = (loss_at(plus)[0].loss - loss_at(minus)[0].loss) / (2 * eps)
        assert abs(numeric - grad[i, j]) <= 1e-6


def test_ema_update_examples():
    params = np.array([1.0, -2.0])
    assert np.array_equal(ema_update(np.zeros(2), params, 0.0), params)
    assert ema_update([0.0], [1.0], 0.5)[0] == 0.5
    assert ema_update(ema_update([0.0], [1.0], 0.5), [1.0], 0.5)[0] == 0.75
    with pytest.raises(ContractError):
        ema_update(np.zeros(2), np.zeros(3), 0.5)


def test_inverse_sqrt_factor():
    factor = inverse_sqrt_factor(4)
    assert factor(0) == 0.25
    assert factor(3) == 1.0
    assert factor(15) == pytest.approx(0.5)
    assert inverse_sqrt_factor(0)(0) == 1.0


def test_make_batch_draws_uniform_steps(rng):
    sched = make_linear_alpha(5)
    corpus, _ = _factorized(K=4, N=2, count=50)
    batch = make_batch(corpus, 50_000, sched, NoiseDistribution.absorbing(4), rng)
    counts = np.bincount(batch.t, minlength=6)[1:]
    assert counts.sum() == 50_000
    assert chisquare(counts).pvalue > 0.001


def test_make_batch_masks(rng):
    sched = make_linear_alpha(4)
    corpus, _ = _factorized(K=5, N=6, count=40)
    batch = make_batch(corpus, 400, sched, NoiseDistribution.absorbing(5), rng)
    assert np.array_equal(batch.mask, batch.xt == batch.x0)
    full = batch.t == 4
    assert full.any()
    assert not batch.mask[full].any()
    assert batch.conditions is None


def test_conditioned_batch_supports_and_ordering(rng):
    sched = make_linear_alpha(6)
    noise = NoiseDistribution.absorbing(5)
    corpus, _ = _factorized(K=5, N=4, count=30)
    first, second = make_conditioned_batch(corpus, 2000, sched, noise, rng)
    assert np.all(first.t <= second.t)
    assert np.array_equal(first.x0, second.x0)
    assert np.all((first.xt == first.x0) | (first.xt == noise.mask_id))
    # tokens still clean at t were clean at every earlier step of the coupled chain
    coupled = first.t < second.t
    assert np.all(first.xt[coupled][second.mask[coupled]] == first.x0[coupled][second.mask[coupled]])


def test_conditioned_batch_marginal_matches_forward(rng):
    T, K = 4, 4
    sched = make_linear_alpha(T)
    noise = NoiseDistribution.uniform(K)
    corpus = Corpus(rows=np.full((1, 1), 2))
    first, _ = make_conditioned_batch(corpus, 60_000, sched, noise, rng)
    for s in range(1, T):
        chosen = first.xt[first.t == s, 0]
        empirical = np.bincount(chosen, minlength=K) / len(chosen)
        assert total_variation(empirical, q_xt_given_x0(2, s, sched, noise)) < 0.02


def test_conditioned_batch_keeps_sources(rng):
    corpus, _ = generate_corpus("reverse-pairs", 6, 4, 20, 0)
    first, second = make_conditioned_batch(corpus, 8, make_linear_alpha(4), NoiseDistribution.absorbing(6), rng)
    for i in range(8):
        assert first.condition(i) is second.condition(i)
        assert np.array_equal(first.condition(i)[::-1], first.x0[i])


def test_batch_loss_of_clean_batch_is_zero(linear4):
    model = _small_model(4, 3)
    x0 = np.array([[0, 1, 2], [2, 2, 1]])
    batch = Batch(x0=x0, xt=x0.copy(), t=np.array([1, 3]), mask=np.ones_like(x0, dtype=bool))
    loss, grad, weight = batch_loss(model, batch, "linear", linear4, 0.1)
    assert loss == 0.0 and not grad.any()
    assert weight == pytest.approx(0.5 * (1.0 + 0.5))


def test_batch_loss_normalizes_by_noisy_positions(linear4):
    model = _small_model(4, 3)
    x0 = np.array([[0, 1, 2]])
    xt = np.array([[3, 1, 3]])
    batch = Batch(x0=x0, xt=xt, t=np.array([2]), mask=xt == x0)
    loss, _, _ = batch_loss(model, batch, "constant", linear4, 0.0)
    report, _ = loss_simple(model.forward(xt[0], 2), x0[0], xt[0], 2, "constant", linear4)
    assert loss == pytest.approx(report.loss / 2.0, rel=1e-12)


def test_zero_learning_rate_leaves_parameters(absorbing8):
    corpus, _ = _factorized(K=8, N=4, count=40)
    model = _small_model(8, 4)
    init = model.params.copy()
    cfg = TrainConfig(steps=5, batch_size=4, learning_rate=0.0, ema_decay=0.5, seed=1)
    _, ema, history = train(model, corpus, cfg, make_linear_alpha(6), absorbing8)
    assert np.array_equal(model.params, init)
    assert np.array_equal(ema.params, init)
    assert [r["step"] for r in history] == [0, 1, 2, 3, 4]


def test_training_is_reproducible(absorbing8):
    corpus, _ = _factorized(K=8, N=4, count=40)
    sched = make_linear_alpha(6)
    cfg = TrainConfig(steps=6, batch_size=4, learning_rate=0.01, warmup_steps=2, seed=7, conditioned=True)
    runs = [train(_small_model(8, 4), corpus, cfg, sched, absorbing8) for _ in range(2)]
    assert np.array_equal(runs[0][0].params, runs[1][0].params)
    assert np.array_equal(runs[0][1].params, runs[1][1].params)
    assert [r["loss"] for r in runs[0][2]] == [r["loss"] for r in runs[1][2]]


def test_training_moves_parameters_and_ema_lags(absorbing8):
    corpus, _ = _factorized(K=8, N=4, count=40)
    model = _small_model(8, 4)
    init = model.params.copy()
    cfg = TrainConfig(steps=4, batch_size=4, learning_rate=0.01, warmup_steps=1, ema_decay=0.9, ema_start=2)
    trainer = Trainer(model, corpus, cfg, make_linear_alpha(6), absorbing8)
    trainer.train(show_progress=False)
    assert not np.array_equal(model.params, init)
    assert not np.array_equal(trainer.ema_params, model.params)
    assert trainer.global_step == 4


def test_trainer_rejects_inconsistent_inputs(absorbing8):
    corpus, _ = _factorized(K=8, N=4, count=10)
    with pytest.raises(ConfigError):
        Trainer(_small_model(8, 4), corpus, TrainConfig(T=5), make_linear_alpha(6), absorbing8)
    with pytest.raises(ConfigError):
        Trainer(_small_model(8, 3), corpus, TrainConfig(), make_linear_alpha(6), absorbing8)
    masked = Corpus(rows=np.full((2, 4), 7))
    with pytest.raises(ConfigError):
        Trainer(_small_model(8, 4), masked, TrainConfig(), make_linear_alpha(6), absorbing8)


def test_divergence_guard(absorbing8, monkeypatch):
    corpus, _ = _factorized(K=8, N=4, count=10)
    model = _small_model(8, 4)
    monkeypatch.setattr(trainer_module, "batch_loss",
                        lambda m, *args: (float("nan"), np.zeros_like(m.params), 1.0))
    trainer = Trainer(model, corpus, TrainConfig(steps=3, batch_size=2), make_linear_alpha(6), absorbing8)
    with pytest.raises(DivergenceError):
        trainer.train(show_progress=False)


def test_batch_loss_reports_non_finite_output_as_divergence(linear4):
    model = _small_model(4, 3)
    model.params[:] = np.inf
    x0 = np.array([[0, 1, 2]])
    xt = np.array([[3, 1, 3]])
    batch = Batch(x0=x0, xt=xt, t=np.array([2]), mask=xt == x0)
    with pytest.raises(DivergenceError):
        batch_loss(model, batch, "linear", linear4, 0.0)


def test_exploding_learning_rate_raises_divergence(absorbing8):
    corpus, _ = _factorized(K=8, N=4, count=20)
    cfg = TrainConfig(steps=6, batch_size=4, learning_rate=1e300, warmup_steps=1, seed=2)
    with pytest.raises(DivergenceError):
        train(_small_model(8, 4), corpus, cfg, make_linear_alpha(6), absorbing8)


def test_heldout_cross_entropy_prefers_oracle(rng):
    K, N = 6, 5
    sched, noise = make_linear_alpha(10), NoiseDistribution.absorbing(K)
    corpus, data_model = _factorized(K=K, N=N, count=300, seed=4)
    oracle = heldout_cross_entropy(OracleDenoiser(data_model, sched, noise), corpus, sched, noise,
                                   np.random.default_rng(0))
    flat = heldout_cross_entropy(ConstantDenoiser(np.full(K, 1 / K)), corpus, sched, noise,
                                 np.random.default_rng(0))
    assert flat == pytest.approx(np.log(K))
    assert oracle < flat


def test_negative_elbo_is_finite_and_nonnegative(rng):
    K, N = 5, 4
    sched, noise = make_linear_alpha(6), NoiseDistribution.absorbing(K)
    data_model = random_factorized_model(K, N, rng)
    denoiser = OracleDenoiser(data_model, sched, noise)
    for row in data_model.sample(5, rng):
        value = negative_elbo(denoiser, row, sched, noise, rng)
        assert np.isfinite(value) and value >= 0.0


@pytest.mark.slow
def test_factorized_training_approaches_oracle():
    K, N, T = 8, 6, 20
    sched, noise = make_linear_alpha(T), NoiseDistribution.absorbing(K)
    corpus, data_model = generate_corpus("factorized", K, N, 4000, 0)
    heldout = Corpus(rows=data_model.sample(1000, np.random.default_rng(99)))
    cfg = TrainConfig(T=T, steps=3000, batch_size=32, learning_rate=0.002, warmup_steps=100,
                      ema_decay=0.995, ema_start=1000, seed=0)
    _, ema, _ = train(TrainableDenoiser(DenoiserArch(K=K, N_max=N), rng=np.random.default_rng(0)), corpus, cfg,
                      sched, noise)
    learned = heldout_cross_entropy(ema, heldout, sched, noise, np.random.default_rng(1))
    oracle = heldout_cross_entropy(OracleDenoiser(data_model, sched, noise), heldout, sched, noise,
                                   np.random.default_rng(1))
    assert learned - oracle <= 0.05


@pytest.mark.slow
def test_reverse_pairs_decoding():
    K, N, T = 16, 8, 20
    sched, noise = make_linear_alpha(T), NoiseDistribution.absorbing(K)
    corpus, _ = generate_corpus("reverse-pairs", K, N, 4000, 0)
    test_set, _ = generate_corpus("reverse-pairs", K, N, 100, 1)
    arch = DenoiserArch(K=K, N_max=N)
    cfg = TrainConfig(T=T, steps=3000, learning_rate=0.003, ema_decay=0.995, ema_start=1000, seed=0)
    _, ema, _ = train(TrainableDenoiser(arch, rng=np.random.default_rng(0)), corpus, cfg, sched, noise)
    provider = CoefficientProvider(sched, noise)
    rng = np.random.default_rng(2)
    hits = [
        np.array_equal(sample(ema, N, list(range(T, -1, -2)), RoutingStrategy.adaptive("cosine"), 1.0, "argmax",
                              test_set.sources[i], rng, provider), test_set.rows[i])
        for i in range(len(test_set))
    ]
    assert np.mean(hits) >= 0.9


@pytest.mark.slow
def test_ablation_trend():
    K, N, T = 16, 8, 20
    sched, noise = make_linear_alpha(T), NoiseDistribution.absorbing(K)
    corpus, _ = generate_corpus("reverse-pairs", K, N, 4000, 0)
    test_set, _ = generate_corpus("reverse-pairs", K, N, 100, 1)
    heldout, _ = generate_corpus("reverse-pairs", K, N, 500, 3)
    provider = CoefficientProvider(sched, noise)
    steps = list(range(T, -1, -2))

    def decode_hits(model, strategy, seed):
        rng = np.random.default_rng(seed)
        return sum(
            np.array_equal(sample(model, N, steps, strategy, 1.0, "argmax", test_set.sources[i], rng, provider),
                           test_set.rows[i])
            for i in range(len(test_set))
        )

    losses = {"linear": [], "original": []}
    adaptive_hits, stochastic_hits = 0, 0
    # under-trained on purpose
    for seed in range(3):
        for scheme in losses:
            cfg = TrainConfig(T=T, steps=200, scheme=scheme, learning_rate=0.003, ema_decay=0.995, seed=seed)
            model, _, _ = train(TrainableDenoiser(DenoiserArch(K=K, N_max=N), rng=np.random.default_rng(seed)),
                                corpus, cfg, sched, noise)
            losses[scheme].append(heldout_cross_entropy(model, heldout, sched, noise, np.random.default_rng(7)))
            if scheme == "linear":
                adaptive_hits += decode_hits(model, RoutingStrategy.adaptive("cosine"), seed)
                stochastic_hits += decode_hits(model, RoutingStrategy.stochastic(), seed)

    assert np.mean(losses["linear"]) <= np.mean(losses["original"])
    assert adaptive_hits >= stochastic_hits
