"""Training loop contracts: schedules, refresh, the meta step (with its
finite-difference oracle), determinism, and evaluation."""

import copy

import numpy as np
import pytest
from conftest import assert_grads_close, finite_difference

from metaloss import autodiff as ad
from metaloss import classifier as cl
from metaloss import datasets as ds
from metaloss import trainer


def _noisy_blobs(seed=0):
    data = ds.gen_blobs(3, 30, 3, 8.0, seed=seed)
    return ds.inject_symmetric_noise(data, 0.3, seed=seed + 1)


def _warm_state(data, config, epochs=2):
    rng = np.random.default_rng(config.seed)
    state = trainer.init_state(data, config)
    for epoch in range(epochs):
        trainer.warmup_epoch(state, data, config, rng,
                             trainer.cosine_lr(config.lr, epoch, config.epochs))
    trainer.refresh_epoch(state, data, config, rng)
    return state, rng


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert trainer.cosine_lr(0.1, 0, 100) == pytest.approx(0.1, abs=1e-15)
        assert trainer.cosine_lr(0.1, 100, 100) == pytest.approx(0.0, abs=1e-15)
        assert trainer.cosine_lr(0.1, 50, 100) == pytest.approx(0.05, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            trainer.cosine_lr(0.1, 101, 100)


class TestConfig:
    def test_validation_messages(self):
        with pytest.raises(trainer.ConfigError, match="warmup_epochs"):
            trainer.TrainConfig(epochs=5, warmup_epochs=9).validate()
        with pytest.raises(trainer.ConfigError, match="batch_size"):
            trainer.TrainConfig(batch_size=1).validate()
        with pytest.raises(trainer.ConfigError, match="baseline"):
            trainer.TrainConfig(baseline="nope").validate()

    def test_unknown_key_named(self):
        with pytest.raises(trainer.ConfigError, match="mystery_key"):
            trainer.config_from_dict({"mystery_key": 3})

    def test_bad_value_named(self):
        with pytest.raises(trainer.ConfigError, match="epochs"):
            trainer.config_from_dict({"epochs": "many"})

    def test_roundtrip(self):
        config = trainer.TrainConfig(epochs=12, baseline="ce")
        assert trainer.config_from_dict(config.to_dict()) == config


class TestWarmup:
    def test_meta_params_untouched(self):
        data = _noisy_blobs()
        config = trainer.TrainConfig(epochs=10, warmup_epochs=2, batch_size=16,
                                     rank_bins=10, seed=0)
        rng = np.random.default_rng(0)
        state = trainer.init_state(data, config)
        before = [p.copy() for p in state.meta_arrays()]
        trainer.warmup_epoch(state, data, config, rng, lr=0.1)
        for a, b in zip(before, state.meta_arrays()):
            assert (a == b).all()

    def test_same_seed_identical_weights(self):
        data = _noisy_blobs()
        config = trainer.TrainConfig(epochs=10, warmup_epochs=2, batch_size=16,
                                     rank_bins=10, seed=4)
        weights = []
        for _ in range(2):
            rng = np.random.default_rng(7)
            state = trainer.init_state(data, config)
            trainer.warmup_epoch(state, data, config, rng, lr=0.1)
            weights.append([p.copy() for p in state.model_arrays()])
        for a, b in zip(*weights):
            assert (a == b).all()

    def test_reaches_90_percent_on_clean_blobs(self):
        data = ds.gen_blobs(4, 40, 4, 8.0, seed=2)
        config = trainer.TrainConfig(epochs=10, warmup_epochs=5, batch_size=16, seed=0)
        rng = np.random.default_rng(0)
        state = trainer.init_state(data, config)
        for epoch in range(config.warmup_epochs):
            trainer.warmup_epoch(state, data, config, rng,
                                 trainer.cosine_lr(config.lr, epoch, config.epochs))
        pred = np.argmax(cl.forward(state.model, data.features), axis=1)
        assert (pred == data.given_labels).mean() >= 0.9


class TestRefresh:
    def test_loss_cache_matches_independent_recomputation(self):
        data = _noisy_blobs()
        config = trainer.TrainConfig(epochs=10, warmup_epochs=1, batch_size=16,
                                     rank_bins=10, seed=0)
        state, _ = _warm_state(data, config)
        # independent recomputation: per-sample, explicit softmax normalization
        for i in range(data.n):
            logits = cl.forward(state.model, data.features[i:i + 1])[0]
            shifted = logits - logits.max()
            probs = np.exp(shifted) / np.exp(shifted).sum()
            expected = -np.log(probs[data.given_labels[i]])
            assert abs(state.loss_cache[i] - expected) <= 1e-12

    def test_bins_and_split_invariants(self):
        data = _noisy_blobs()
        config = trainer.TrainConfig(epochs=10, warmup_epochs=1, batch_size=16,
                                     rank_bins=10, seed=0)
        state, _ = _warm_state(data, config)
        assert state.ranks.bins.max() < config.rank_bins
        union = np.concatenate([state.split.meta_indices, state.split.train_indices])
        np.testing.assert_array_equal(np.sort(union), np.arange(data.n))


class TestMetaStep:
    def test_zero_meta_lr_leaves_theta_and_matches_plain_step(self):
        data = _noisy_blobs()
        config = trainer.TrainConfig(epochs=10, warmup_epochs=1, batch_size=16,
                                     rank_bins=10, seed=0, meta_lr=0.0)
        state, _ = _warm_state(data, config)
        twin = copy.deepcopy(state)
        train_idx = state.split.train_indices[:16]
        meta_idx = state.split.meta_indices
        theta_before = [p.copy() for p in state.meta_arrays()]
        trainer.meta_step(state, data, train_idx, meta_idx, lr=0.05, config=config)
        for a, b in zip(theta_before, state.meta_arrays()):
            assert (a == b).all()

        # a plain SGD step on the same adaptive loss gives the same omega
        loss, _, omega, _ = trainer.adaptive_loss_graphs(
            twin, data, train_idx, meta_idx, config
        )
        grads = [g.value for g in ad.grad(loss, omega)]
        trainer._sgd_step(twin, grads, 0.05, config)
        for a, b in zip(state.model_arrays(), twin.model_arrays()):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_deterministic(self):
        data = _noisy_blobs()
        config = trainer.TrainConfig(epochs=10, warmup_epochs=1, batch_size=16,
                                     rank_bins=10, seed=0)
        results = []
        for _ in range(2):
            state, _ = _warm_state(data, config)
            train_idx = state.split.train_indices[:16]
            loss = trainer.meta_step(state, data, train_idx,
                                     state.split.meta_indices, 0.05, config)
            results.append((loss, [p.copy() for p in state.model_arrays()],
                            [p.copy() for p in state.meta_arrays()]))
        assert results[0][0] == results[1][0]
        for a, b in zip(results[0][1] + results[0][2], results[1][1] + results[1][2]):
            assert (a == b).all()

    def test_virtual_step_does_not_mutate_state(self):
        data = _noisy_blobs()
        config = trainer.TrainConfig(epochs=10, warmup_epochs=1, batch_size=16,
                                     rank_bins=10, seed=0)
        state, _ = _warm_state(data, config)
        omega_before = [p.copy() for p in state.model_arrays()]
        buffers_before = [b.copy() for b in state.momentum_buffers]
        train_loss, meta_loss, omega, theta = trainer.adaptive_loss_graphs(
            state, data, state.split.train_indices[:16], state.split.meta_indices,
            config,
        )
        ad.meta_gradient(train_loss, meta_loss, omega, theta, alpha=0.05)
        for a, b in zip(omega_before, state.model_arrays()):
            assert (a == b).all()
        for a, b in zip(buffers_before, state.momentum_buffers):
            assert (a == b).all()

    def test_theta_update_ignores_weight_decay(self):
        data = _noisy_blobs()
        base = trainer.TrainConfig(epochs=10, warmup_epochs=1, batch_size=16,
                                   rank_bins=10, seed=0)
        warm, _ = _warm_state(data, base)
        thetas, omegas = [], []
        for wd in (0.0, 0.1):
            config = trainer.TrainConfig(epochs=10, warmup_epochs=1, batch_size=16,
                                         rank_bins=10, seed=0, weight_decay=wd)
            state = copy.deepcopy(warm)
            trainer.meta_step(state, data, state.split.train_indices[:16],
                              state.split.meta_indices, 0.05, config)
            thetas.append([p.copy() for p in state.meta_arrays()])
            omegas.append([p.copy() for p in state.model_arrays()])
        for a, b in zip(*thetas):
            assert (a == b).all()
        # while the classifier step does feel the decay
        assert any((a != b).any() for a, b in zip(*omegas))

    def test_meta_gradient_matches_finite_differences(self):
        """FD oracle over every corrector/margin parameter entry on a small
        instance, via the same graph builder the trainer uses."""
        data = _noisy_blobs(seed=5)
        config = trainer.TrainConfig(epochs=10, warmup_epochs=1, batch_size=16,
                                     rank_bins=5, seed=3, corrector_hidden=4)
        state, _ = _warm_state(data, config)
        train_idx = state.split.train_indices[:12]
        meta_idx = state.split.meta_indices
        lr = 0.05

        train_loss, meta_loss, omega, theta = trainer.adaptive_loss_graphs(
            state, data, train_idx, meta_idx, config
        )
        analytic = [g.value for g in ad.meta_gradient(
            train_loss, meta_loss, omega, theta, alpha=lr
        )]

        def composed():
            train_loss, meta_loss, omega, theta = trainer.adaptive_loss_graphs(
                state, data, train_idx, meta_idx, config
            )
            om_grads = ad.grad(train_loss, omega)
            virtual = {w: ad.add(w, ad.scale(g, -lr)) for w, g in zip(omega, om_grads)}
            return ad.substitute(meta_loss, virtual).item()

        arrays = state.meta_arrays()
        numeric = finite_difference(composed, arrays, h=1e-5)
        assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-9)


class TestTrainLoop:
    def test_ce_baseline_never_touches_theta(self):
        data = _noisy_blobs()
        config = trainer.TrainConfig(epochs=6, warmup_epochs=1, batch_size=16,
                                     rank_bins=10, seed=0, baseline="ce")
        state = trainer.init_state(data, config)
        before = [p.copy() for p in state.meta_arrays()]
        result = trainer.train(data, config)
        for a, b in zip(before, result.final_state.meta_arrays()):
            assert (a == b).all()

    def test_metrics_history_bit_reproducible(self):
        data = _noisy_blobs()
        config = trainer.TrainConfig(epochs=6, warmup_epochs=2, batch_size=16,
                                     rank_bins=10, seed=11)
        hold = ds.gen_blobs(3, 20, 3, 8.0, seed=99)
        h1 = trainer.train(data, config, holdout=hold).history
        h2 = trainer.train(data, config, holdout=hold).history
        assert h1 == h2

    def test_gmm_baseline_runs(self):
        data = _noisy_blobs()
        config = trainer.TrainConfig(epochs=5, warmup_epochs=2, batch_size=16,
                                     rank_bins=10, seed=0, baseline="gmm_relabel")
        result = trainer.train(data, config)
        assert len(result.history) == 5

    def test_balanced_softmax_baseline_records_fixed_margins(self):
        data = ds.apply_longtail(ds.gen_blobs(3, 40, 3, 8.0, seed=0), 4.0, seed=1)
        config = trainer.TrainConfig(epochs=4, warmup_epochs=1, batch_size=16,
                                     rank_bins=10, seed=0, baseline="balanced_softmax")
        result = trainer.train(data, config)
        counts = data.class_counts()
        np.testing.assert_allclose(
            result.history[-1]["margins"], np.log(counts), atol=1e-12
        )

    def test_dynamic_matches_ce_on_clean_balanced_data(self):
        """Paired runs on unbiased data: the adaptive loss should not hurt."""
        data = ds.gen_blobs(3, 60, 4, 8.0, seed=1)
        hold = ds.gen_blobs(3, 60, 4, 8.0, seed=2)
        accs = {}
        for baseline in ("dynamic", "ce"):
            config = trainer.TrainConfig(epochs=30, warmup_epochs=3, batch_size=32,
                                         rank_bins=20, seed=0, baseline=baseline)
            accs[baseline] = trainer.train(data, config, holdout=hold).history[-1]["test_acc"]
        assert abs(accs["dynamic"] - accs["ce"]) <= 0.02


class TestEvaluate:
    def test_perfect_and_constant_predictors(self):
        hold = ds.gen_blobs(4, 25, 4, 8.0, seed=3)
        config = trainer.TrainConfig(epochs=40, warmup_epochs=0, batch_size=32,
                                     baseline="ce", seed=0)
        trained = trainer.train(hold, config).final_state.model
        acc, _ = trainer.evaluate(trained, hold)
        assert acc == 1.0

        constant = cl.init_mlp(4, 8, 4, seed=0)
        for w in constant.weights:
            w[:] = 0.0
        acc, per_class = trainer.evaluate(constant, hold)
        assert acc == pytest.approx(0.25)
        assert per_class == [1.0, 0.0, 0.0, 0.0]

    def test_per_class_weighted_average_equals_overall(self):
        data = ds.apply_longtail(ds.gen_blobs(3, 40, 3, 4.0, seed=0), 4.0, seed=1)
        model = cl.init_mlp(3, 8, 3, seed=1)
        acc, per_class = trainer.evaluate(model, data)
        counts = data.class_counts()
        weighted = float(np.dot(per_class, counts) / counts.sum())
        assert acc == pytest.approx(weighted, abs=1e-12)
