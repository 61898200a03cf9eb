import numpy as np
import pytest

from eegid.backend import XVECTOR
from eegid.errors import ArtifactError, DivergenceError, ValidationError
from eegid.features import FeatureSegment
from eegid.xvector import (
    BASELINE,
    MODIFIED,
    PARAM_NAMES,
    TrainConfig,
    backward,
    batch_loss,
    extract_xvector,
    forward,
    init_net,
    label_indices_for,
    read_xvec,
    train,
    write_xvec,
)

TINY = dict(n_bins=4, hidden1=6, hidden2=5, embed_dim=3, n_channels=2)


def tiny_net(mode=MODIFIED, seed=0, subjects=("s01", "s02")):
    return init_net(mode, TINY["n_bins"], TINY["hidden1"], TINY["hidden2"],
                    TINY["embed_dim"], subjects, TINY["n_channels"], seed=seed)


def trainable_net(seed=0):
    # wide enough that the 3-unit embedding ReLU cannot go entirely dead
    return init_net(MODIFIED, TINY["n_bins"], 8, 8, 8, ["s01", "s02"], TINY["n_channels"], seed=seed)


def tiny_feat(rng, subject="s01", c=2, n=5, d=4):
    return FeatureSegment(subject, "sess1", "task01", rng.uniform(0.05, 1.5, (c, n, d)),
                          360.0, (3.0, 30.0))


class TestForward:
    def test_zero_input_zero_bias_flows_to_uniform_softmax(self):
        # the variance-pooling epsilon (1e-8) leaks a constant at that scale,
        # so "zero" means zero up to eps times the embedding weights
        net = tiny_net()
        feat = FeatureSegment("s01", "sess1", "task01", np.zeros((2, 5, 4)), 360.0, (3.0, 30.0))
        logits, emb = forward(net, feat)
        np.testing.assert_allclose(emb, 0.0, atol=1e-6)
        np.testing.assert_allclose(logits, 0.0, atol=1e-6)
        soft = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(soft, 0.5, atol=1e-7)

    def test_single_channel_modes_identical(self, rng):
        for seed in (0, 1):
            base = init_net(BASELINE, 4, 6, 5, 3, ["a", "b"], 1, seed=seed)
            mod = init_net(MODIFIED, 4, 6, 5, 3, ["a", "b"], 1, seed=seed)
            feat = tiny_feat(rng, c=1)
            lb, eb = forward(base, feat)
            lm, em = forward(mod, feat)
            np.testing.assert_allclose(lb, lm, atol=1e-12)
            np.testing.assert_allclose(eb, em, atol=1e-12)

    def test_modified_pooling_width(self):
        # per-channel mean+variance: 2 * C * h2 inputs to the embedding layer
        net = init_net(MODIFIED, 9, 16, 512, 160, ["a", "b"], 9, seed=0)
        assert net.pool_dim == 2 * 9 * 512 == 9216
        assert net.w3.shape == (9216, 160)

    def test_single_frame_rejected(self, rng):
        net = tiny_net()
        with pytest.raises(ValidationError, match="2 frames"):
            forward(net, tiny_feat(rng, n=1))

    def test_wrong_channel_count_rejected(self, rng):
        net = tiny_net()
        with pytest.raises(ArtifactError):
            forward(net, tiny_feat(rng, c=3))

    def test_length_invariance_of_shapes(self, rng):
        net = tiny_net()
        for n in (2, 5, 41, 100):
            logits, emb = forward(net, tiny_feat(rng, n=n))
            assert logits.shape == (2,)
            assert emb.shape == (3,)


def finite_difference_check(net, feats, labels, step=1e-3):
    """Max relative error between analytic and central-difference gradients."""
    _, grads = backward(net, feats, labels)
    worst = 0.0
    for name in PARAM_NAMES:
        param = getattr(net, name)
        grad = grads[name]
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = param[idx]
            param[idx] = orig + step
            up = batch_loss(net, feats, labels)
            param[idx] = orig - step
            down = batch_loss(net, feats, labels)
            param[idx] = orig
            numeric = (up - down) / (2 * step)
            denom = max(abs(numeric), abs(grad[idx]), 1e-8)
            worst = max(worst, abs(numeric - grad[idx]) / denom)
    return worst


class TestBackward:
    def test_gradients_match_finite_differences(self, rng):
        net = tiny_net(seed=3)
        feats = [tiny_feat(rng, s) for s in ("s01", "s02", "s01")]
        labels = label_indices_for(net, feats)
        assert finite_difference_check(net, feats, labels) < 1e-4

    def test_baseline_mode_gradients(self, rng):
        net = tiny_net(mode=BASELINE, seed=5)
        feats = [tiny_feat(rng, s) for s in ("s01", "s02")]
        labels = label_indices_for(net, feats)
        assert finite_difference_check(net, feats, labels) < 1e-4

    def test_duplicated_sample_keeps_mean_gradient(self, rng):
        net = tiny_net(seed=1)
        feat = tiny_feat(rng)
        _, single = backward(net, [feat], [0])
        _, doubled = backward(net, [feat, feat], [0, 0])
        for name in PARAM_NAMES:
            np.testing.assert_allclose(doubled[name], single[name], atol=1e-12)

    def test_saturated_correct_logit_kills_loss_and_gradients(self, rng):
        net = tiny_net(seed=2)
        net.b4[...] = np.array([1e4, 0.0])  # class 0 overwhelmingly favored
        feat = tiny_feat(rng)
        loss, grads = backward(net, [feat], [0])
        assert loss == pytest.approx(0.0, abs=1e-12)
        for name in PARAM_NAMES:
            np.testing.assert_allclose(grads[name], 0.0, atol=1e-12)

    def test_mixed_shapes_in_one_batch(self, rng):
        net = tiny_net(seed=4)
        feats = [tiny_feat(rng, "s01", n=5), tiny_feat(rng, "s02", n=9)]
        labels = label_indices_for(net, feats)
        loss, grads = backward(net, feats, labels)
        # equals the average of the two single-sample gradients
        l1, g1 = backward(net, [feats[0]], [labels[0]])
        l2, g2 = backward(net, [feats[1]], [labels[1]])
        assert loss == pytest.approx((l1 + l2) / 2, abs=1e-12)
        for name in PARAM_NAMES:
            np.testing.assert_allclose(grads[name], (g1[name] + g2[name]) / 2, atol=1e-12)


class TestTrain:
    def _dataset(self, rng, n_per_subject=12):
        feats = []
        for i, subject in enumerate(("s01", "s02")):
            for _ in range(n_per_subject):
                feat = tiny_feat(rng, subject)
                feat.features[:, :, i] += 2.0  # separable
                feats.append(feat)
        return feats

    def test_zero_learning_rate_keeps_parameters(self, rng):
        net = tiny_net(seed=6)
        before = {n: getattr(net, n).copy() for n in PARAM_NAMES}
        feats = self._dataset(rng)
        out = train(net, feats, [], TrainConfig(learning_rate=0.0, epochs=2, batch_size=4, seed=0))
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(out, name), before[name])

    def test_deterministic_given_seed(self, rng):
        feats = self._dataset(rng)
        cfg = TrainConfig(epochs=3, batch_size=4, seed=11)
        a = train(tiny_net(seed=6), feats, [], cfg)
        b = train(tiny_net(seed=6), feats, [], cfg)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_loss_drops_below_uniform_after_one_epoch(self, rng):
        feats = self._dataset(rng, n_per_subject=20)
        net = trainable_net(seed=3)
        labels = label_indices_for(net, feats)
        out = train(net, feats, [], TrainConfig(learning_rate=0.02, epochs=1, batch_size=4, seed=0))
        assert batch_loss(out, feats, labels) < np.log(2)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises_with_epoch(self, rng):
        feats = self._dataset(rng)
        net = tiny_net(seed=8)
        with pytest.raises(DivergenceError) as err:
            train(net, feats, [], TrainConfig(learning_rate=1e150, epochs=4, batch_size=4, seed=0))
        assert err.value.epoch >= 0

    def test_needs_two_subjects(self, rng):
        net = tiny_net(seed=0)
        feats = [tiny_feat(rng, "s01") for _ in range(4)]
        with pytest.raises(ValidationError):
            train(net, feats, [], TrainConfig(epochs=1))

    def test_unknown_subject_rejected(self, rng):
        net = tiny_net(seed=0)
        feats = [tiny_feat(rng, "zz"), tiny_feat(rng, "s02")]
        with pytest.raises(ValidationError, match="zz"):
            train(net, feats, [], TrainConfig(epochs=1))


class TestExtract:
    def test_embedding_is_pre_activation_layer_output(self, rng):
        net = tiny_net(seed=9)
        feat = tiny_feat(rng)
        emb = extract_xvector(net, feat)
        assert emb.kind == XVECTOR
        assert emb.key == feat.key
        # some coordinates should be negative: extraction happens before ReLU
        found_negative = False
        for seed in range(5):
            e = extract_xvector(tiny_net(seed=seed), tiny_feat(rng))
            found_negative = found_negative or np.any(e.v < 0)
        assert found_negative

    def test_identical_segments_identical_embeddings(self, rng):
        net = tiny_net(seed=0)
        feat = tiny_feat(rng)
        np.testing.assert_array_equal(extract_xvector(net, feat).v, extract_xvector(net, feat).v)

    def test_reference_config_embedding_width(self):
        net = init_net(MODIFIED, 9, 32, 16, 160, ["a", "b"], 9, seed=0)
        assert net.embed_dim == 160

    def test_longer_segments_without_retraining(self, rng):
        net = tiny_net(seed=0)
        for n in (5, 10, 20):  # 15 s / 30 s / 60 s worth of frames
            emb = extract_xvector(net, tiny_feat(rng, n=n))
            assert emb.v.shape == (3,)


class TestXvecFile:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        feats = [tiny_feat(rng, s) for s in ("s01", "s02")] * 4
        net = tiny_net(seed=12)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=1)
        net = train(net, feats, [], cfg)
        write_xvec(net, tmp_path / "n.xvec", cfg=cfg, config_hash="f00d")
        back, prov = read_xvec(tmp_path / "n.xvec")
        assert back.mode == net.mode
        assert back.subjects == net.subjects
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(back, name), getattr(net, name))
        assert prov["config_hash"] == "f00d"
        assert prov["train_config"]["seed"] == 1
