import math

import numpy as np
import pytest

from sinkclust.episodes import AttributeSpec, Episode, gen_attribute_dataset, sample_episode
from sinkclust.errors import NumericError, ParseError, ShapeError
from sinkclust.metrics import EvalPlan, aggregate, run_episodes
from sinkclust.trainer import (
    Adam,
    EmbeddingModel,
    SGD,
    TrainConfig,
    TrainingDiverged,
    embed_forward,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    surrogate_loss_and_grads,
    train,
)


@pytest.fixture(scope="module")
def dataset():
    spec = AttributeSpec(((4, 3.0), (4, 3.0)), noise_std=1.0, samples_per_combination=4)
    return gen_attribute_dataset(spec, 1)


@pytest.fixture(scope="module")
def heldout():
    spec = AttributeSpec(((4, 3.0), (4, 3.0)), noise_std=1.0, samples_per_combination=4)
    return gen_attribute_dataset(spec, 2, "test")


def small_episode(seed, d_in=4, way=2, shot=3, query=2):
    rng = np.random.default_rng(seed)
    ys = np.repeat(np.arange(way), shot)
    yq = np.repeat(np.arange(way), query)
    centres = rng.normal(size=(way, d_in)) * 2
    return Episode(centres[ys] + rng.normal(size=(ys.size, d_in)), ys,
                   centres[yq] + rng.normal(size=(yq.size, d_in)), yq, way, shot, query)


def protonet_loss(zs, ys, zq, yq, k):
    """Reference prototypical-network episode loss written with plain loops."""
    protos = []
    for j in range(k):
        members = [zs[i] for i in range(len(ys)) if ys[i] == j]
        protos.append([sum(col) / len(members) for col in zip(*members)])
    total = 0.0
    for q, label in zip(zq, yq):
        logits = [-sum((a - b) ** 2 for a, b in zip(q, p)) for p in protos]
        top = max(logits)
        log_norm = top + math.log(sum(math.exp(l - top) for l in logits))
        total -= logits[label] - log_norm
    return total / len(yq)


class TestModel:
    def test_zero_depth_identity(self, rng):
        x = rng.normal(size=(5, 3))
        assert np.array_equal(EmbeddingModel([3])(x), x)
        assert EmbeddingModel([3]).n_params == 0

    def test_identity_layer(self, rng):
        x = rng.normal(size=(5, 3))
        m = EmbeddingModel([3, 3], weights=[np.eye(3)], biases=[np.zeros(3)])
        np.testing.assert_array_equal(embed_forward(m, x), x)

    def test_seeded_determinism(self, rng):
        x = rng.normal(size=(5, 4))
        a = EmbeddingModel.init([4, 8, 3], seed=9)(x)
        b = EmbeddingModel.init([4, 8, 3], seed=9)(x)
        assert a.tobytes() == b.tobytes()

    def test_init_bounds(self):
        m = EmbeddingModel.init([16, 4], seed=0)
        assert np.abs(m.weights[0]).max() <= 0.25 and np.abs(m.biases[0]).max() <= 0.25

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            EmbeddingModel([3, 2])(np.zeros((2, 4)))

    def test_fingerprint_tracks_sizes(self):
        a = EmbeddingModel.init([4, 8, 3], seed=0).fingerprint
        assert EmbeddingModel.init([4, 8, 3], seed=1).fingerprint == a
        assert EmbeddingModel.init([4, 9, 3], seed=0).fingerprint != a
        assert EmbeddingModel([4]).fingerprint != a

    def test_flat_round_trip(self):
        m = EmbeddingModel.init([3, 5, 2], seed=0)
        v = m.flat()
        m2 = EmbeddingModel.init([3, 5, 2], seed=1)
        m2.set_flat(v)
        assert np.array_equal(m2.flat(), v)


class TestLoss:
    def test_perfect_classifier(self):
        far = np.array([[0.0, 0.0], [1e3, 0.0]])
        ep = Episode(far, np.array([0, 1]), far.copy(), np.array([0, 1]), 2, 1, 1)
        loss, _ = surrogate_loss_and_grads(EmbeddingModel([2]), ep, TrainConfig(conditional="softmax", center_weight=0))
        assert loss.surrogate == 0.0 and loss.total == 0.0

    def test_collapsed_class_center_zero(self):
        xs = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
        ep = Episode(xs, np.array([0, 0, 1, 1]), xs[:2], np.array([0, 1]), 2, 2, 1)
        loss, _ = surrogate_loss_and_grads(EmbeddingModel([2]), ep, TrainConfig(conditional="softmax"))
        assert loss.center == 0.0

    @pytest.mark.parametrize("mode", ["softmax", "sinkhorn"])
    def test_decomposition_identity(self, mode):
        ep = small_episode(0)
        cfg = TrainConfig(conditional=mode, center_weight=0.7)
        loss, _ = surrogate_loss_and_grads(EmbeddingModel.init([4, 8, 4], seed=0), ep, cfg)
        assert loss.total == loss.surrogate + 0.7 * loss.center
        assert loss.surrogate >= 0 and loss.center >= 0

    def test_protonet_equivalence(self):
        for seed in range(10):
            ep = small_episode(seed, way=3, shot=4, query=3)
            m = EmbeddingModel.init([4, 8, 4], seed=seed)
            loss, _ = surrogate_loss_and_grads(m, ep, TrainConfig(conditional="softmax", center_weight=0))
            ref = protonet_loss(m(ep.support_x).tolist(), ep.support_y, m(ep.query_x).tolist(), ep.query_y, 3)
            assert abs(loss.surrogate - ref) <= 1e-12

    def test_unroll_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(conditional="sinkhorn", unroll_iters=0)

    def test_non_finite_named(self):
        ep = small_episode(0)
        big = Episode(ep.support_x * 1e160, ep.support_y, ep.query_x * 1e160, ep.query_y, 2, 3, 2)
        with pytest.raises(NumericError, match="surrogate|center"):
            surrogate_loss_and_grads(EmbeddingModel([4]), big, TrainConfig())

    def test_missing_class(self):
        ep = small_episode(0)
        bad = Episode(ep.support_x, np.zeros(6, dtype=int), ep.query_x, ep.query_y, 2, 3, 2)
        with pytest.raises(ValueError, match="class 1"):
            surrogate_loss_and_grads(EmbeddingModel([4]), bad, TrainConfig())


class TestGradients:
    @pytest.mark.parametrize("mode", ["softmax", "sinkhorn"])
    def test_small_model(self, mode):
        ep = small_episode(3)
        err = grad_check(EmbeddingModel.init([4, 8, 4], seed=3), ep, TrainConfig(conditional=mode, unroll_iters=10))
        assert err <= 1e-4

    def test_zero_depth_softmax(self):
        assert grad_check(EmbeddingModel([4]), small_episode(1), TrainConfig(conditional="softmax")) <= 1e-6

    def test_zero_depth_sinkhorn(self):
        assert grad_check(EmbeddingModel([4]), small_episode(1), TrainConfig(unroll_iters=10)) <= 1e-4

    def test_center_only(self):
        m = EmbeddingModel.init([4, 8, 4], seed=2)
        assert grad_check(m, small_episode(2), TrainConfig(center_weight=1.0), include_surrogate=False) <= 1e-6

    def test_deep_model(self):
        m = EmbeddingModel.init([4, 6, 6, 3], seed=5)
        assert grad_check(m, small_episode(5, way=3), TrainConfig(unroll_iters=5)) <= 1e-4

    def test_detects_corrupted_gradient(self, monkeypatch):
        import sinkclust.trainer as trainer

        honest = trainer.surrogate_loss_and_grads

        def corrupted(*args, **kwargs):
            loss, grads = honest(*args, **kwargs)
            flat = np.concatenate([g.ravel() for g in grads])
            i = int(np.argsort(np.abs(flat))[len(flat) // 2])  # a mid-sized entry
            for g in grads:
                if i < g.size:
                    g.flat[i] *= 1.01
                    break
                i -= g.size
            return loss, grads

        monkeypatch.setattr(trainer, "surrogate_loss_and_grads", corrupted)
        m = EmbeddingModel.init([4, 8, 4], seed=3)
        assert grad_check(m, small_episode(3), TrainConfig(conditional="softmax")) > 1e-4

    def test_bad_step(self):
        with pytest.raises(ValueError):
            grad_check(EmbeddingModel([4]), small_episode(0), TrainConfig(), step=0)


class TestOptimizers:
    def test_sgd_momentum(self):
        p = [np.array([1.0])]
        opt = SGD(0.1, momentum=0.5)
        opt.step(p, [np.array([2.0])])
        opt.step(p, [np.array([2.0])])
        # v1 = 2, v2 = 0.5 * 2 + 2 = 3; p = 1 - 0.1 * (2 + 3)
        assert p[0][0] == pytest.approx(0.5, abs=1e-15)

    def test_adam_first_step_is_lr_sign(self):
        p = [np.array([1.0, -1.0])]
        Adam(0.01).step(p, [np.array([3.0, -0.2])])
        np.testing.assert_allclose(p[0], [0.99, -0.99], atol=1e-9)


class TestTraining:
    def test_zero_lr_keeps_parameters(self, dataset):
        m0 = EmbeddingModel.init([dataset.dim, 8, 4], seed=0)
        m, curve = train(dataset, m0, TrainConfig(lr=0.0, epochs=2, episodes_per_epoch=5, n_way=3))
        assert m.flat().tobytes() == m0.flat().tobytes()
        assert len(curve) == 2

    def test_seeded_determinism(self, dataset):
        m0 = EmbeddingModel.init([dataset.dim, 8, 4], seed=0)
        cfg = TrainConfig(epochs=2, episodes_per_epoch=10, n_way=3)
        a, ca = train(dataset, m0, cfg)
        b, cb = train(dataset, m0, cfg)
        assert a.flat().tobytes() == b.flat().tobytes() and ca == cb

    def test_divergence_returns_last_good(self, dataset):
        m0 = EmbeddingModel.init([dataset.dim, 8, 4], seed=0)
        with pytest.raises(TrainingDiverged) as info:
            train(dataset, m0, TrainConfig(optimizer="sgd", lr=1e8, epochs=2, episodes_per_epoch=10, n_way=3))
        assert np.all(np.isfinite(info.value.model.flat()))

    def test_wider_training_episodes(self, dataset):
        m0 = EmbeddingModel.init([dataset.dim, 8, 4], seed=0)
        _, curve = train(dataset, m0, TrainConfig(epochs=1, episodes_per_epoch=3, n_way=2, train_way=4))
        assert len(curve) == 1

    def test_center_loss_compacts_classes(self, dataset, heldout):
        m0 = EmbeddingModel.init([dataset.dim, 16, 8], seed=0)

        def within_variance(m):
            out = []
            for i in range(100):
                ep = sample_episode(heldout, 4, 5, 0, 1000 + i)
                z = m(ep.support_x)
                out.append(np.mean([z[ep.support_y == j].var(0).sum() for j in range(4)]))
            return np.mean(out)

        runs = {lam: train(dataset, m0, TrainConfig(center_weight=lam, epochs=5, n_way=4, seed=3))[0]
                for lam in (0.0, 1.0)}
        assert within_variance(runs[1.0]) < within_variance(runs[0.0])

    def test_training_improves_clustering(self, dataset, heldout):
        m0 = EmbeddingModel.init([dataset.dim, 16, 8], seed=0)
        m, _ = train(dataset, m0, TrainConfig(epochs=20, episodes_per_epoch=100, n_way=4, seed=3))
        plan = EvalPlan("fsc", 4, 5, 0, 77)
        before = aggregate(run_episodes(heldout, plan, 200, m0)).metrics["clustering_accuracy"].mean
        after = aggregate(run_episodes(heldout, plan, 200, m)).metrics["clustering_accuracy"].mean
        assert after >= before


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = EmbeddingModel.init([5, 7, 3], seed=4)
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, m, TrainConfig(), final=False)
        back, header = load_checkpoint(p)
        assert back.flat().tobytes() == m.flat().tobytes()
        assert header["final"] is False and header["sizes"] == [5, 7, 3]
        assert header["fingerprint"] == m.fingerprint and header["config"]["gamma"] == 1.0

    def test_layout(self, tmp_path):
        m = EmbeddingModel([2, 1], weights=[np.array([[1.5], [2.5]])], biases=[np.array([-1.0])])
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, m)
        raw = p.read_bytes()
        assert raw[:4] == b"SKC1"
        hlen = int.from_bytes(raw[4:8], "little")
        assert np.frombuffer(raw[8 + hlen:], "<f8").tolist() == [1.5, 2.5, -1.0]

    def test_truncated(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, EmbeddingModel.init([3, 2], seed=0))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ParseError):
            load_checkpoint(p)
