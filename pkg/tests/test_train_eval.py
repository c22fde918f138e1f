import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit

from flickerlens.errors import ConfigError, InputError
from flickerlens.model import FlickerNet, ModelConfig
from flickerlens.synthdata import Flicker, SynthSpec, make_dataset
from flickerlens.train_eval import (
    AuxHeads, MomentumSGD, TrainConfig, bce_grad, bce_loss, evaluate, roc_metrics, total_loss, total_loss_grads,
    train_toy, video_level_scores,
)
from oracles import group_average, pairwise_auc

LN2 = math.log(2)
SMALL = SynthSpec(height=32, width=32, length=16, center_margin=8, flicker=Flicker((16, 16), radius=4, bins=(2, 3, 5)))
SMALL_MODEL = dict(height=32, width=32, length=16)


def small_data(n=4, seed=0):
    ds = make_dataset(n, n, SMALL, seed)
    return list(zip(ds.clips, ds.labels))


class TestLosses:
    @pytest.mark.parametrize("label", [0, 1])
    def test_zero_logit(self, label):
        assert abs(bce_loss(0.0, label) - LN2) < 1e-12

    def test_saturation(self):
        assert bce_loss(20.0, 1) <= 1e-8
        assert bce_loss(-800.0, 0) == 0.0 and bce_loss(800.0, 0) == 800.0

    @given(st.floats(-30, 30), st.sampled_from([0, 1]))
    def test_grad_matches_fd(self, z, y):
        h = 1e-5
        fd = (bce_loss(z + h, y) - bce_loss(z - h, y)) / (2 * h)
        assert abs(bce_grad(z, y) - fd) <= 1e-6

    @given(st.floats(-50, 50), st.sampled_from([0, 1]))
    def test_non_negative(self, z, y):
        assert bce_loss(z, y) >= 0

    def test_bad_label(self):
        with pytest.raises(InputError):
            bce_loss(0.0, 2)

    def test_total_loss_arithmetic(self):
        cfg = TrainConfig()
        assert abs(total_loss((0, 0, 0), 0.0, 1, 0, cfg) - 3 * LN2) < 1e-12
        assert abs(total_loss((0, 0, 0), 0.0, 1, 4, cfg) - 4 * LN2) < 1e-12

    @given(st.floats(-40, 40))
    def test_warmup_ignores_final_logit(self, z):
        cfg = TrainConfig()
        assert total_loss((0.1, -0.2, 0.3), z, 1, 3, cfg) == total_loss((0.1, -0.2, 0.3), 0.0, 1, 3, cfg)

    def test_schedule(self):
        cfg = TrainConfig()
        assert [cfg.lam(e) for e in range(6)] == [0, 0, 0, 0, 1, 1]
        toy = TrainConfig.toy()
        assert (toy.epochs, toy.lambda_warmup_epochs) == (10, 2)
        with pytest.raises(ConfigError):
            cfg.lam(-1)

    @given(st.integers(0, 3), st.floats(0, 5), st.sampled_from([0, 1]))
    def test_monotone_in_each_term(self, which, step, y):
        cfg = TrainConfig(lambda_warmup_epochs=0)
        base = [0.2, -0.1, 0.4, 0.3]
        away = -1 if y == 1 else 1
        moved = list(base)
        moved[which] += away * step
        lo = total_loss(base[:3], base[3], y, 0, cfg)
        hi = total_loss(moved[:3], moved[3], y, 0, cfg)
        assert hi >= lo

    def test_loss_grads(self):
        g = total_loss_grads({"g": 0.0, "p": 1.0, "sp": -1.0, "final": 2.0}, 1, 0, TrainConfig())
        assert g["final"] == 0.0 and g["g"] == -0.5 and abs(g["p"] - (expit(1.0) - 1)) < 1e-15

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(lambda_warmup_epochs=41), dict(batch_size=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestOptimizer:
    def test_zero_momentum_is_gradient_descent(self):
        a = np.diag([1.0, 3.0])
        w = np.array([2.0, -1.0])
        ref = w.copy()
        opt = MomentumSGD({"w": w}, lambda n: "main", {"main": (0.1, 0.0)})
        for _ in range(25):
            opt.step({"w": a @ w})
            ref = ref - 0.1 * (a @ ref)
            assert np.array_equal(w, ref)

    def test_momentum_recursion(self):
        w = np.array([1.0])
        opt = MomentumSGD({"w": w}, lambda n: "g", {"g": (0.5, 0.9)}, weight_decay=0.0)
        opt.step({"w": np.array([1.0])})
        opt.step({"w": np.array([1.0])})
        assert w[0] == pytest.approx(1.0 - 0.5 * 1.0 - 0.5 * 1.9)

    def test_weight_decay_and_frozen_group(self):
        w1, w2 = np.array([2.0]), np.array([2.0])
        opt = MomentumSGD({"a": w1, "b": w2}, lambda n: n, {"a": (0.1, 0.0), "b": (0.0, 0.9)}, weight_decay=0.5)
        opt.step({"a": np.zeros(1), "b": np.ones(1)})
        assert w1[0] == pytest.approx(2.0 - 0.1 * 1.0) and w2[0] == 2.0


class TestMetrics:
    def test_hand_example(self):
        assert roc_metrics([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == 0.75

    def test_perfect(self):
        r = roc_metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert (r.auc, r.eer) == (1.0, 0.0)

    def test_reversed(self):
        r = roc_metrics([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])
        assert (r.auc, r.eer) == (0.0, 1.0)

    def test_all_ties(self):
        r = roc_metrics([0.3] * 6, [0, 1, 0, 1, 1, 0])
        assert r.auc == 0.5 and r.eer == 0.5

    def test_curve_is_monotone(self):
        rng = np.random.default_rng(0)
        r = roc_metrics(rng.random(50), rng.integers(0, 2, 50))
        assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)
        assert (r.fpr[0], r.tpr[0], r.fpr[-1], r.tpr[-1]) == (0, 0, 1, 1)
        assert abs(r.auc - np.trapezoid(r.tpr, r.fpr)) < 1e-12

    @given(st.lists(st.tuples(st.integers(0, 20), st.sampled_from([0, 1])), min_size=2, max_size=200))
    def test_matches_pairwise_oracle(self, items):
        scores, labels = zip(*items)
        if len(set(labels)) < 2:
            with pytest.raises(InputError):
                roc_metrics(scores, labels)
            return
        assert roc_metrics(scores, labels).auc == pairwise_auc(scores, labels)

    @pytest.mark.parametrize("scores,labels", [([0.1, 0.2], [1, 1]), ([0.1], [0, 1]), ([0.1, 0.2], [0, 2])])
    def test_bad_inputs(self, scores, labels):
        with pytest.raises(InputError):
            roc_metrics(scores, labels)

    def test_video_scores(self):
        assert video_level_scores([("a", 0.3), ("b", 0.6)]) == [("a", 0.3), ("b", 0.6)]
        assert video_level_scores([("v", 0.2), ("v", 0.8)]) == [("v", 0.5)]

    @given(st.lists(st.tuples(st.sampled_from("abcde"), st.floats(0, 1)), min_size=1, max_size=60))
    def test_video_scores_match_oracle(self, pairs):
        got = dict(video_level_scores(pairs))
        want = group_average(pairs)
        assert got.keys() == want.keys()
        assert all(abs(got[k] - want[k]) <= 1e-12 for k in want)


class TestTraining:
    def test_rejects_single_class(self):
        data = [(c, 1) for c, _ in small_data(2)]
        with pytest.raises(InputError):
            train_toy(data, TrainConfig.toy(epochs=1), ModelConfig(**SMALL_MODEL))
        with pytest.raises(InputError):
            train_toy([], TrainConfig.toy(epochs=1))

    def test_zero_learning_rate_leaves_parameters(self):
        data = small_data(3)
        cfg = TrainConfig.toy(epochs=2, lr_main=0.0, lr_head=0.0, lr_apm=0.0, seed=1)
        mcfg = ModelConfig(**SMALL_MODEL, seed=1)
        trained = train_toy(data, cfg, mcfg).model
        fresh = FlickerNet(mcfg)
        fresh.calibrate([fresh.volume(c) for c, _ in data])
        for k, v in fresh.parameters().items():
            assert v.tobytes() == trained.parameters()[k].tobytes(), k

    def test_deterministic_and_frozen_stacks(self):
        data = small_data(3, seed=2)
        cfg = TrainConfig.toy(epochs=3, seed=4)
        mcfg = ModelConfig(**SMALL_MODEL, seed=4)
        a = train_toy(data, cfg, mcfg)
        b = train_toy(data, cfg, mcfg)
        assert a.loss_trace == b.loss_trace
        fresh = FlickerNet(mcfg)
        fresh.calibrate([fresh.volume(c) for c, _ in data])
        for k, v in fresh.frozen_parameters().items():
            assert v.tobytes() == a.model.frozen_parameters()[k].tobytes(), k
        assert set(a.head_trace[0]) == {"g", "p", "sp", "final"}

    def test_loss_decreases(self):
        data = small_data(8, seed=3)
        res = train_toy(data, TrainConfig.toy(epochs=6, lambda_warmup_epochs=1, seed=3), ModelConfig(**SMALL_MODEL, seed=3))
        assert res.loss_trace[-1] < res.loss_trace[0]

    def test_aux_heads_view(self):
        net = FlickerNet(ModelConfig(**SMALL_MODEL))
        heads = AuxHeads.of(net)
        assert AuxHeads.logit(heads.phi_g, np.zeros(heads.phi_g[0].shape[0])) == float(heads.phi_g[1][0])

    def test_evaluate_report(self):
        data = small_data(3, seed=5)
        res = train_toy(data, TrainConfig.toy(epochs=2, seed=5), ModelConfig(**SMALL_MODEL, seed=5))
        clips = [c for c, _ in data]
        rep = evaluate(res.model, clips, [y for _, y in data], [c.source_id for c in clips])
        assert set(rep) == {"auc", "eer", "n_videos", "n_clips", "per_video_scores"}
        assert rep["n_videos"] == rep["n_clips"] == 6 and 0 <= rep["auc"] <= 1
        with pytest.raises(InputError):
            evaluate(res.model, clips[:2], [0, 1], ["same", "same"])


def test_training_moves_parts_onto_flicker():
    # start every part at the frame centre so any localisation has to be learned
    tr, te = make_dataset(40, 40, seed=7), make_dataset(20, 20, seed=8)
    data = list(zip(tr.clips, tr.labels))

    def hit_rate(net):
        hits = fakes = 0
        for clip, entry in zip(te.clips, te.manifest):
            if entry["label"]:
                fakes += 1
                parts, _ = net.part_params(net.prepare(clip))
                cy, cx = entry["center"]
                hits += any(math.hypot(p.a - cx, p.b - cy) <= 8 for p in parts)
        return hits / fakes

    mcfg = ModelConfig(seed=7, apm_spread=False)
    frozen = train_toy(data, TrainConfig.toy(seed=7, lr_apm=0.0), mcfg).model
    learned = train_toy(data, TrainConfig.toy(seed=7), mcfg).model
    before, after = hit_rate(frozen), hit_rate(learned)
    assert after >= 0.8 and after > before + 0.3
