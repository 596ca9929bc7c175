import numpy as np
import pytest

from rankpress import autodiff as ad
from rankpress.autodiff import Tensor
from rankpress.distill import (
    BatchPredictions,
    DistillConfig,
    batch_loss,
    class_loss,
    distill_train,
    instance_loss,
    multilevel_loss,
    teacher_probabilities,
    total_loss,
)
from rankpress.nets import NetConfig, build_teacher
from rankpress.optim import OptimizerConfig, pair_accuracy, ranking_bce_loss
from rankpress.synthdata import generate_sources, make_pair_dataset


def bp(t, s, labels=None):
    t = np.asarray(t, dtype=np.float64)
    if labels is None:
        labels = np.zeros_like(t)
    return BatchPredictions(t, np.asarray(s, dtype=np.float64), np.asarray(labels, dtype=np.float64))


class TestInstanceLoss:
    def test_soft_target_hand_value(self):
        # -(0.8 ln 0.6 + 0.2 ln 0.4)
        expected = -(0.8 * np.log(0.6) + 0.2 * np.log(0.4))
        got = float(instance_loss(bp([0.8], [0.6])).data)
        assert got == pytest.approx(expected, abs=1e-9)
        assert got == pytest.approx(0.59192, abs=5e-6)

    def test_matching_distributions_minimize(self):
        base = float(instance_loss(bp([0.8], [0.8])).data)
        for s in (0.6, 0.7, 0.9, 0.95):
            assert float(instance_loss(bp([0.8], [s])).data) > base

    def test_mean_over_batch(self):
        single = [float(instance_loss(bp([t], [s])).data) for t, s in ((0.8, 0.6), (0.3, 0.4))]
        both = float(instance_loss(bp([0.8, 0.3], [0.6, 0.4])).data)
        assert both == pytest.approx(np.mean(single), abs=1e-12)


class TestBatchLoss:
    def test_single_item_oracle(self):
        # (1 - 0.25)^2 / 1
        assert float(batch_loss(bp([1.0], [0.5])).data) == pytest.approx(0.5625, abs=1e-12)

    def test_two_item_oracle(self):
        # Gram_t = [[1,0],[0,0]], Gram_s = 0.25 everywhere; squared Frobenius
        # diff = 0.5625 + 3 * 0.0625 = 0.75; scaled by 1/B -> 0.375
        assert float(batch_loss(bp([1.0, 0.0], [0.5, 0.5])).data) == pytest.approx(0.375, abs=1e-9)

    def test_identical_probabilities_zero(self):
        p = [0.3, 0.8, 0.6]
        assert float(batch_loss(bp(p, p)).data) == pytest.approx(0.0, abs=1e-15)

    def test_independent_gram_oracle(self):
        rng = np.random.default_rng(0)
        t = rng.random(5)
        s = rng.random(5)
        expected = np.sum((np.outer(t, t) - np.outer(s, s)) ** 2) / 5
        assert float(batch_loss(bp(t, s)).data) == pytest.approx(expected, abs=1e-12)


class TestClassLoss:
    def test_oracle(self):
        # (sum s^2 - sum t^2)^2 = (0.5 - 1.0)^2
        assert float(class_loss(bp([1.0, 0.0], [0.5, 0.5])).data) == pytest.approx(0.25, abs=1e-9)

    def test_matching_energy_zero(self):
        assert float(class_loss(bp([0.6, 0.8], [0.8, 0.6])).data) == pytest.approx(0.0, abs=1e-15)


class TestTotals:
    def test_multilevel_is_sum_of_parts(self):
        x = bp([1.0, 0.0], [0.5, 0.5])
        parts = sum(float(f(x).data) for f in (instance_loss, batch_loss, class_loss))
        assert float(multilevel_loss(x).data) == pytest.approx(parts, abs=1e-12)

    def test_total_adds_weighted_ranking_term(self):
        x = bp([1.0, 0.0], [0.5, 0.5], labels=[1.0, 0.0])
        rank = float(ranking_bce_loss(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0])).data)
        expected = float(multilevel_loss(x).data) + 0.1 * rank
        assert float(total_loss(x, alpha=0.1).data) == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        t = rng.random(4) * 0.8 + 0.1
        labels = (rng.random(4) > 0.5).astype(np.float64)
        raw = Tensor(rng.standard_normal(4), requires_grad=True)

        def fwd():
            return total_loss(BatchPredictions(t, ad.sigmoid(raw), labels), alpha=0.1)

        assert ad.gradient_check(fwd, {"raw": raw}) < 1e-4

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            BatchPredictions(np.array([0.5]), np.array([0.5, 0.5]), np.array([1.0]))


@pytest.fixture(scope="module")
def distill_setup():
    cfg = NetConfig(channels=1, height=12, width=12, conv_widths=(6,), dense_widths=(8,), seed=0)
    small = NetConfig(channels=1, height=12, width=12, conv_widths=(3,), dense_widths=(4,), seed=1)
    sources = generate_sources(8, (1, 12, 12), seed=0)
    train = make_pair_dataset(sources, levels=6, pairs_per_source=6, seed=0)
    val = make_pair_dataset(sources, levels=6, pairs_per_source=2, seed=1)
    t_spec, t_params = build_teacher(cfg)
    from rankpress.optim import train_ranking

    train_ranking(t_spec, t_params, train, OptimizerConfig(epochs=6, seed=0))
    return small, (t_spec, t_params), train, val


class TestDistillTrain:
    def test_teacher_untouched_and_student_learns(self, distill_setup):
        small, (t_spec, t_params), train, val = distill_setup
        before = {k: p.data.copy() for k, p in t_params.items()}
        s_spec, s_params = build_teacher(small)
        cfg = DistillConfig(epochs=6, optim=OptimizerConfig(epochs=6, seed=0))
        log = distill_train(t_spec, t_params, s_spec, s_params, train, cfg, val_set=val)
        for k in t_params:
            assert np.array_equal(t_params[k].data, before[k])
        assert log[-1]["total"] < log[0]["total"]
        assert pair_accuracy(s_spec, s_params, val) > 0.5

    def test_deterministic(self, distill_setup):
        small, (t_spec, t_params), train, _ = distill_setup
        outs = []
        for _ in range(2):
            s_spec, s_params = build_teacher(small)
            cfg = DistillConfig(epochs=2, optim=OptimizerConfig(epochs=2, seed=3))
            distill_train(t_spec, t_params, s_spec, s_params, train, cfg)
            outs.append({k: p.data.copy() for k, p in s_params.items()})
        for k in outs[0]:
            assert np.array_equal(outs[0][k], outs[1][k])

    def test_log_schema(self, distill_setup):
        small, (t_spec, t_params), train, val = distill_setup
        s_spec, s_params = build_teacher(small)
        cfg = DistillConfig(epochs=2, optim=OptimizerConfig(epochs=2, seed=0))
        log = distill_train(t_spec, t_params, s_spec, s_params, train, cfg, val_set=val)
        for row in log:
            for key in ("epoch", "instance", "batch", "class", "rank", "total", "val_acc", "diverged"):
                assert key in row

    def test_teacher_probabilities_match_forward(self, distill_setup):
        small, (t_spec, t_params), train, _ = distill_setup
        from rankpress.optim import predict_batch

        probs = teacher_probabilities(t_spec, t_params, train[:8])
        direct = predict_batch(t_spec, t_params, train[:8]).data
        assert np.array_equal(probs, direct)
