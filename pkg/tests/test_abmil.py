"""Model unit tests: forward invariants, hand-derived gradients vs central
finite differences, training determinism, checkpoint round trips."""

import math

import numpy as np
import pytest

from confbench import abmil
from confbench.core import FormatError
from confbench.metrics import auc

STEP = 1e-5
# central differences are only a valid oracle when no ReLU pre-activation
# sits within reach of the perturbation; instances closer than this get redrawn
KINK_MARGIN = 5e-4


def _kink_distance(model, bag, masks=None):
    state = abmil._forward_pass(model, bag, masks)
    return min(float(np.abs(z).min()) for z in state["pre_acts"])


def _fd_grads(model, bag, label, eps, masks=None, step=STEP):
    out = {}
    for name, param in model.named_params():
        flat = param.reshape(-1)
        grad = np.empty_like(flat)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp = abmil.loss(abmil._forward_pass(model, bag, masks)["prob"], label, eps)
            flat[idx] = orig - step
            lm = abmil.loss(abmil._forward_pass(model, bag, masks)["prob"], label, eps)
            flat[idx] = orig
            grad[idx] = (lp - lm) / (2 * step)
        out[name] = grad.reshape(param.shape)
    return out


def _max_rel_err(analytic, numeric):
    worst = 0.0
    for name, g in analytic.items():
        a = g.reshape(-1)
        b = numeric[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


def _draw_instance(seed, *, gated, k=8, widths=(12, 6), attention_dim=4):
    """A (model, bag, label) draw guaranteed clear of ReLU kinks."""
    for attempt in range(50):
        cfg = abmil.AbmilConfig(
            layer_widths=widths, attention_dim=attention_dim, gated=gated, dropout=0.0, seed=seed + 1000 * attempt
        )
        model = abmil.init_model(cfg, k)
        rng = np.random.default_rng(seed + 1000 * attempt + 1)
        bag = rng.normal(size=(int(rng.integers(2, 17)), k))
        label = int(rng.integers(0, 2))
        if _kink_distance(model, bag) > KINK_MARGIN:
            return cfg, model, bag, label
    raise AssertionError("no kink-free draw found")


class TestConfig:
    def test_defaults(self):
        cfg = abmil.AbmilConfig()
        assert cfg.layer_widths == (32, 16)
        assert cfg.bag_size == 64
        assert cfg.max_epochs == 60
        cfg.validate()

    def test_full_scale_preset(self):
        cfg = abmil.full_scale_config()
        assert cfg.layer_widths[0] == 1024
        assert cfg.bag_size == 1024
        assert cfg.max_epochs == 300
        cfg.validate()
        assert abmil.full_scale_config(max_epochs=5).max_epochs == 5

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(layer_widths=()),
            dict(layer_widths=(0, 4)),
            dict(attention_dim=0),
            dict(dropout=1.0),
            dict(dropout=-0.1),
            dict(label_smoothing=1.0),
            dict(lr=0.0),
            dict(bag_size=0),
            dict(bags_per_batch=0),
            dict(max_epochs=-1),
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            abmil.AbmilConfig(**kwargs).validate()


class TestForward:
    def test_attention_sums_to_one(self):
        _, model, bag, _ = _draw_instance(0, gated=False)
        pred = abmil.forward(model, bag)
        w = pred.attention.weights
        assert abs(float(w.sum()) - 1.0) <= 1e-9
        assert (w >= 0).all()
        assert w.size == bag.shape[0]

    def test_label_hat_thresholds_at_half(self):
        _, model, bag, _ = _draw_instance(1, gated=False)
        pred = abmil.forward(model, bag)
        assert pred.label_hat == int(pred.probability >= 0.5)

    def test_single_tile_gets_full_attention(self):
        _, model, _, _ = _draw_instance(2, gated=False)
        pred = abmil.forward(model, np.random.default_rng(0).normal(size=(1, 8)))
        assert pred.attention.weights[0] == 1.0

    def test_permutation_equivariance(self):
        _, model, bag, _ = _draw_instance(3, gated=True)
        rng = np.random.default_rng(9)
        perm = rng.permutation(bag.shape[0])
        a = abmil.forward(model, bag)
        b = abmil.forward(model, bag[perm])
        assert a.probability == pytest.approx(b.probability, abs=1e-12)
        np.testing.assert_allclose(a.attention.weights[perm], b.attention.weights, atol=1e-12)

    def test_duplicate_tiles_share_attention(self):
        _, model, bag, _ = _draw_instance(4, gated=False)
        bag = bag.copy()
        bag[2] = bag[0]
        w = abmil.forward(model, bag).attention.weights
        assert abs(w[2] - w[0]) < 1e-15

    def test_zero_attention_params_give_uniform_weights(self):
        _, model, bag, _ = _draw_instance(5, gated=False)
        model.attn_w[:] = 0.0
        w = abmil.forward(model, bag).attention.weights
        np.testing.assert_allclose(w, np.full(bag.shape[0], 1.0 / bag.shape[0]), atol=1e-15)

    def test_shape_mismatch(self):
        _, model, _, _ = _draw_instance(6, gated=False)
        with pytest.raises(abmil.ShapeMismatch):
            abmil.forward(model, np.zeros((4, 5)))
        with pytest.raises(abmil.ShapeMismatch):
            abmil.forward(model, np.zeros((0, 8)))
        with pytest.raises(abmil.ShapeMismatch):
            abmil.forward(model, np.zeros(8))

    def test_predict_full_covers_every_tile(self):
        _, model, _, _ = _draw_instance(7, gated=False)
        emb = np.random.default_rng(3).normal(size=(23, 8))
        grid = tuple((j // 5, j % 5) for j in range(23))
        wsi = abmil.EmbeddedWsi(wsi_id="w", label=1, split="test", embeddings=emb, grid_pos=grid)
        pred = abmil.predict_full(model, wsi)
        assert pred.wsi_id == "w"
        assert pred.attention.weights.size == 23
        assert pred.attention.grid_pos == grid
        ref = abmil.forward(model, emb)
        assert pred.probability == ref.probability

    def test_attention_map_validation(self):
        with pytest.raises(ValueError):
            abmil.AttentionMap(wsi_id="w", weights=np.array([0.6, 0.6]))
        with pytest.raises(ValueError):
            abmil.AttentionMap(wsi_id="w", weights=np.array([1.5, -0.5]))
        with pytest.raises(ValueError):
            abmil.AttentionMap(wsi_id="w", weights=np.array([]))


class TestLoss:
    def test_half_probability_gives_ln_two(self):
        assert abmil.loss(0.5, 1, 0.0) == pytest.approx(math.log(2.0))
        assert abmil.loss(0.5, 0, 0.0) == pytest.approx(math.log(2.0))

    def test_smoothed_target_formula(self):
        expected = -(0.95 * math.log(0.7) + 0.05 * math.log(0.3))
        assert abmil.loss(0.7, 1, 0.1) == pytest.approx(expected, abs=1e-15)

    def test_minimum_sits_at_smoothed_target(self):
        probs = np.linspace(0.01, 0.99, 981)
        losses = [abmil.loss(float(p), 1, 0.1) for p in probs]
        assert probs[int(np.argmin(losses))] == pytest.approx(0.95, abs=1e-3)

    def test_label_symmetry(self):
        assert abmil.loss(0.3, 1, 0.1) == pytest.approx(abmil.loss(0.7, 0, 0.1), abs=1e-12)

    def test_exact_endpoints_rejected(self):
        for bad in (0.0, 1.0, -0.1, 1.1):
            with pytest.raises(abmil.DomainError):
                abmil.loss(bad, 1, 0.1)

    def test_clamp_keeps_extremes_finite(self):
        assert math.isfinite(abmil.loss(1e-9, 0, 0.0))
        assert abmil.loss(1e-9, 1, 0.0) == pytest.approx(-math.log(1e-7))


class TestGradients:
    @pytest.mark.parametrize("seed,gated", [(10, False), (11, False), (12, True), (13, True)])
    def test_matches_finite_differences(self, seed, gated):
        cfg, model, bag, label = _draw_instance(seed, gated=gated)
        _, grads = abmil.backward(model, bag, label, cfg.label_smoothing)
        numeric = _fd_grads(model, bag, label, cfg.label_smoothing)
        assert _max_rel_err(grads, numeric) < 1e-4

    def test_dropout_masks_enter_the_gradient(self):
        cfg, model, bag, label = _draw_instance(14, gated=False)
        rng = np.random.default_rng(77)
        masks = [(rng.random((bag.shape[0], w)) < 0.8) / 0.8 for w in cfg.layer_widths]
        assert _kink_distance(model, bag, masks) > KINK_MARGIN
        _, grads = abmil.backward(model, bag, label, cfg.label_smoothing, masks)
        numeric = _fd_grads(model, bag, label, cfg.label_smoothing, masks)
        assert _max_rel_err(grads, numeric) < 1e-4

    def test_zero_attention_weights_still_check_out(self):
        cfg, model, bag, label = _draw_instance(15, gated=False)
        model.attn_w[:] = 0.0
        _, grads = abmil.backward(model, bag, label, cfg.label_smoothing)
        assert all(np.isfinite(g).all() for g in grads.values())
        numeric = _fd_grads(model, bag, label, cfg.label_smoothing)
        assert _max_rel_err(grads, numeric) < 1e-4

    def test_stationary_head_has_zero_gradient(self):
        cfg, model, bag, _ = _draw_instance(16, gated=False)
        # pin the output to the smoothed target: BCE gradient prob - target = 0
        model.head_w[:] = 0.0
        model.head_b[0] = math.log(0.95 / 0.05)
        pred = abmil.forward(model, bag)
        assert pred.probability == pytest.approx(0.95, abs=1e-12)
        _, grads = abmil.backward(model, bag, 1, 0.1)
        assert float(np.abs(grads["head.c"]).max()) < 1e-12
        assert float(np.abs(grads["head.b"]).max()) < 1e-12

    def test_loss_value_matches_forward(self):
        cfg, model, bag, label = _draw_instance(17, gated=True)
        value, _ = abmil.backward(model, bag, label, cfg.label_smoothing)
        assert value == abmil.loss(abmil.forward(model, bag).probability, label, cfg.label_smoothing)


def _toy_dataset(k=4, tiles=6, seed=0):
    """Two well-separated embedding clouds, split train/val/test."""
    rng = np.random.default_rng(seed)
    wsis = []
    layout = [("train", 5), ("val", 2), ("test", 2)]
    idx = 0
    for label in (0, 1):
        center = -1.2 if label == 0 else 1.2
        for split, count in layout:
            for _ in range(count):
                emb = rng.normal(center, 1.0, size=(tiles, k))
                wsis.append(
                    abmil.EmbeddedWsi(wsi_id=f"w{idx:02d}", label=label, split=split, embeddings=emb)
                )
                idx += 1
    return wsis


_TRAIN_CFG = abmil.AbmilConfig(
    layer_widths=(8, 4), attention_dim=4, dropout=0.1, lr=5e-3, bag_size=8, bags_per_batch=4, max_epochs=12, seed=5
)


class TestTraining:
    def test_log_and_best_epoch_selection(self):
        data = _toy_dataset()
        model, log = abmil.train(data, _TRAIN_CFG)
        assert [e.epoch for e in log] == list(range(1, 13))
        best = min(e.val_loss for e in log)
        val = [w for w in data if w.split == "val"]
        relived = float(
            np.mean([abmil.loss(abmil.forward(model, w.embeddings).probability, w.label, 0.1) for w in val])
        )
        assert relived == pytest.approx(best, abs=1e-12)

    def test_learns_the_toy_problem(self):
        data = _toy_dataset()
        model, log = abmil.train(data, _TRAIN_CFG)
        held_out = [w for w in data if w.split != "train"]
        pos = [abmil.forward(model, w.embeddings).probability for w in held_out if w.label == 1]
        neg = [abmil.forward(model, w.embeddings).probability for w in held_out if w.label == 0]
        assert auc(pos, neg) >= 0.9
        assert log[-1].train_loss < log[0].train_loss

    def test_deterministic_given_seed(self):
        data = _toy_dataset()
        m1, log1 = abmil.train(data, _TRAIN_CFG)
        m2, log2 = abmil.train(data, _TRAIN_CFG)
        assert m1 == m2
        assert log1 == log2

    def test_zero_epochs_returns_initialized_model(self):
        data = _toy_dataset()
        cfg = abmil.AbmilConfig(layer_widths=(8, 4), attention_dim=4, max_epochs=0, seed=5)
        model, log = abmil.train(data, cfg)
        assert log == []
        stacked = np.concatenate([w.embeddings for w in data if w.split == "train"])
        ref = abmil.init_model(cfg, 4, stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-8))
        assert model == ref

    def test_standardization_from_train_split_only(self):
        data = _toy_dataset()
        model, _ = abmil.train(data, _TRAIN_CFG)
        stacked = np.concatenate([w.embeddings for w in data if w.split == "train"])
        np.testing.assert_allclose(model.feat_mean, stacked.mean(axis=0))
        np.testing.assert_allclose(model.feat_std, stacked.std(axis=0))

    def test_empty_splits_rejected(self):
        data = _toy_dataset()
        no_val = [w for w in data if w.split != "val"]
        with pytest.raises(abmil.EmptySplit):
            abmil.train(no_val, _TRAIN_CFG)
        no_train = [w for w in data if w.split != "train"]
        with pytest.raises(abmil.EmptySplit):
            abmil.train(no_train, _TRAIN_CFG)

    def test_inconsistent_widths_rejected(self):
        data = _toy_dataset()
        odd = abmil.EmbeddedWsi(wsi_id="odd", label=0, split="train", embeddings=np.zeros((3, 7)))
        with pytest.raises(abmil.ShapeMismatch):
            abmil.train(data + [odd], _TRAIN_CFG)

    def test_embedded_wsi_validation(self):
        with pytest.raises(ValueError):
            abmil.EmbeddedWsi(wsi_id="w", label=2, split="train", embeddings=np.zeros((3, 4)))
        with pytest.raises(ValueError):
            abmil.EmbeddedWsi(wsi_id="w", label=0, split="train", embeddings=np.zeros((0, 4)))
        with pytest.raises(ValueError):
            abmil.EmbeddedWsi(
                wsi_id="w", label=0, split="train", embeddings=np.zeros((3, 4)), grid_pos=((0, 0),)
            )


class TestCheckpoint:
    def test_round_trip_equality(self, tmp_path):
        data = _toy_dataset()
        model, _ = abmil.train(data, _TRAIN_CFG)
        path = tmp_path / "model.ckpt"
        abmil.save_model(model, path)
        loaded = abmil.load_model(path)
        assert loaded == model

    def test_round_trip_preserves_predictions_bitwise(self, tmp_path):
        data = _toy_dataset()
        model, _ = abmil.train(data, _TRAIN_CFG)
        path = tmp_path / "model.ckpt"
        abmil.save_model(model, path)
        loaded = abmil.load_model(path)
        for w in data:
            assert abmil.forward(loaded, w.embeddings).probability == abmil.forward(model, w.embeddings).probability

    def test_gated_model_round_trip(self, tmp_path):
        cfg, model, _, _ = _draw_instance(20, gated=True)
        path = tmp_path / "gated.ckpt"
        abmil.save_model(model, path)
        assert abmil.load_model(path) == model

    def test_header_layout(self, tmp_path):
        _, model, _, _ = _draw_instance(21, gated=False)
        path = tmp_path / "m.ckpt"
        abmil.save_model(model, path)
        raw = path.read_bytes()
        assert raw[:4] == b"CBMD"
        assert int.from_bytes(raw[4:6], "little") == 1

    def test_corruption_rejected(self, tmp_path):
        _, model, _, _ = _draw_instance(22, gated=False)
        path = tmp_path / "m.ckpt"
        abmil.save_model(model, path)
        raw = bytearray(path.read_bytes())
        bad_magic = tmp_path / "bad_magic.ckpt"
        bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
        with pytest.raises(FormatError):
            abmil.load_model(bad_magic)
        truncated = tmp_path / "trunc.ckpt"
        truncated.write_bytes(bytes(raw[: len(raw) - 16]))
        with pytest.raises(FormatError):
            abmil.load_model(truncated)
        padded = tmp_path / "padded.ckpt"
        padded.write_bytes(bytes(raw) + b"\x00" * 8)
        with pytest.raises(FormatError):
            abmil.load_model(padded)
