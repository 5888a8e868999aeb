import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import supervised_loss_loop, weak_loss_loop

from weakseg import diffcore as dc
from weakseg.grid import UNANNOTATED, AnnotationMask
from weakseg.losses import (
    WeakLossConfig,
    batch_tags,
    partial_ce,
    size_penalty,
    supervised_class_weights,
    supervised_loss,
    tags_from_annotation,
    weak_loss,
)

W = (0.12, 0.22, 0.22, 0.22, 0.22)


def random_probs(rng, shape):
    logits = rng.normal(size=shape) * 2
    e = np.exp(logits - logits.max(axis=0))
    return e / e.sum(axis=0)


def random_annotations(rng, n, h, w, density=0.15):
    ann = np.full((n, h, w), UNANNOTATED, dtype=np.int8)
    keep = rng.random((n, h, w)) < density
    ann[keep] = rng.integers(1, 6, size=keep.sum())
    # leave some slices entirely unannotated and some classes absent
    ann[rng.random(n) < 0.25] = UNANNOTATED
    return ann


class TestTags:
    def test_present_and_absent(self):
        mask = AnnotationMask.empty((1, 96, 96))
        mask.classes[0, 10, 10] = 1
        mask.classes[0, 20, 20] = 2
        tags = tags_from_annotation(mask, 9216)
        np.testing.assert_array_equal(tags.a, [1, 1, 0, 0, 0])
        np.testing.assert_array_equal(tags.b, [9216, 9216, 0, 0, 0])

    def test_background_never_tagged(self):
        tags = tags_from_annotation(np.zeros((4, 4), np.int8), 16)
        np.testing.assert_array_equal(tags.as_array(), np.zeros((5, 2)))

    def test_batch_tags_per_slice(self):
        ann = np.full((2, 3, 3), UNANNOTATED, np.int8)
        ann[1, 0, 0] = 5
        tags = batch_tags(ann)
        assert tags.shape == (2, 5, 2)
        np.testing.assert_array_equal(tags[0], 0)
        np.testing.assert_array_equal(tags[1, 4], [1, 9])


class TestPartialCE:
    def test_uniform_is_log6(self):
        S = np.full((4, 4), 1 / 6)
        ann = np.zeros((4, 4), bool)
        ann.flat[:10] = True
        assert partial_ce(S, ann).item() == pytest.approx(math.log(6), rel=1e-6)

    def test_nothing_annotated_is_zero(self):
        assert partial_ce(np.full((3, 3), 0.5), np.zeros((3, 3), bool)).item() == 0.0

    def test_zero_probability_is_clamped(self):
        S = np.zeros((2, 2))
        ann = np.ones((2, 2), bool)
        assert partial_ce(S, ann).item() == pytest.approx(-math.log(1e-7), rel=1e-5)


class TestSizePenalty:
    @pytest.mark.parametrize(
        "V, a, b, expected",
        [(0, 1, 9216, 1), (5, 0, 0, 25), (100, 1, 9216, 0), (9300, 1, 9216, 84**2), (1, 1, 9216, 0), (9216, 1, 9216, 0)],
    )
    def test_values(self, V, a, b, expected):
        assert size_penalty(float(V), a, b).item() == pytest.approx(expected)

    def test_inverted_bounds(self):
        with pytest.raises(ValueError):
            size_penalty(1.0, 5, 2)

    @pytest.mark.parametrize("V, a, b", [(0.3, 1, 50), (20.0, 1, 50), (70.0, 1, 50), (3.0, 0, 0)])
    def test_derivative_off_boundary(self, V, a, b):
        with dc.check_mode():
            v = dc.parameter(np.array(V))
            report = dc.grad_check(lambda: size_penalty(v, a, b), v)
        assert report.passed
        expected = 2 * (V - a) if V < a else 2 * (V - b) if V > b else 0.0
        assert float(v.grad) == pytest.approx(expected)


class TestWeakLoss:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        with dc.check_mode():
            for _ in range(10):
                n, h, w = rng.integers(1, 4), rng.integers(2, 7), rng.integers(2, 7)
                S = random_probs(rng, (6, n, h, w))
                ann = random_annotations(rng, n, h, w)
                tags = batch_tags(ann)
                lam = float(rng.choice([1e-5, 1e-2, 0.5]))
                got = weak_loss(S, ann, tags, WeakLossConfig(lam=lam)).item()
                assert got == pytest.approx(weak_loss_loop(S, ann, tags, lam, W), rel=1e-9)

    def test_empty_mask_uniform_prediction(self):
        S = np.full((6, 1, 96, 96), 1 / 6)
        ann = np.full((1, 96, 96), UNANNOTATED, np.int8)
        with dc.check_mode():
            got = weak_loss(S, ann, batch_tags(ann), WeakLossConfig()).item()
        assert got == pytest.approx(1e-5 * sum(W) * (9216 / 6) ** 2, rel=1e-9)

    def test_lambda_zero_ignores_unannotated_voxels(self):
        rng = np.random.default_rng(1)
        S = random_probs(rng, (6, 2, 5, 5))
        ann = random_annotations(rng, 2, 5, 5, density=0.3)
        ann[0, 0, 0] = 2
        cfg = WeakLossConfig(lam=0.0)
        tags = batch_tags(ann)
        base = weak_loss(S, ann, tags, cfg).item()
        other = random_probs(rng, S.shape)
        unann = ann == UNANNOTATED
        S2 = np.where(unann[None], other, S)
        assert weak_loss(S2, ann, tags, cfg).item() == pytest.approx(base, rel=1e-6)

    def test_gradient_only_flows_to_annotated_voxels_at_lambda_zero(self):
        rng = np.random.default_rng(2)
        with dc.check_mode():
            S = dc.parameter(random_probs(rng, (6, 1, 4, 4)))
            ann = random_annotations(rng, 1, 4, 4, density=0.4)
            ann[0, 0, 0] = 3
            dc.backward(weak_loss(S, ann, batch_tags(ann), WeakLossConfig(lam=0.0)))
        unann = ann == UNANNOTATED
        assert np.all(S.grad[:, unann] == 0)
        assert np.all(S.grad[0] == 0)

    def test_size_gradient_follows_mass(self):
        # class 2 absent on the slice: dL/dS_{2,p} = w * lam * 2V for every voxel
        S = np.full((6, 1, 3, 3), 1 / 6)
        ann = np.full((1, 3, 3), UNANNOTATED, np.int8)
        with dc.check_mode():
            St = dc.parameter(S)
            dc.backward(weak_loss(St, ann, batch_tags(ann), WeakLossConfig(lam=0.1)))
        V = 9 / 6
        np.testing.assert_allclose(St.grad[2], 0.22 * 0.1 * 2 * V)

    def test_volume_domain(self):
        rng = np.random.default_rng(3)
        S = random_probs(rng, (6, 3, 4, 4))
        ann = random_annotations(rng, 3, 4, 4, density=0.3)
        cfg = WeakLossConfig(size_domain="volume")
        vol_tags = np.repeat(tags_from_annotation(ann, ann.size).as_array()[None], 3, axis=0)
        with dc.check_mode():
            got = weak_loss(S, ann, vol_tags, cfg).item()
        # one domain: the whole stack as a single "slice"
        stacked = S.reshape(6, 1, 3 * 4, 4)
        assert got == pytest.approx(weak_loss_loop(stacked, ann.reshape(1, 12, 4), vol_tags[:1], 1e-5, W), rel=1e-9)

    def test_rejects_inverted_tags(self):
        tags = np.zeros((1, 5, 2))
        tags[0, 0] = (5, 1)
        with pytest.raises(ValueError):
            weak_loss(np.full((6, 1, 2, 2), 1 / 6), np.full((1, 2, 2), -1), tags, WeakLossConfig())

    @pytest.mark.parametrize(
        "cfg",
        [WeakLossConfig(lam=-1.0), WeakLossConfig(lam=0.0), WeakLossConfig(class_weights=(1, 1)), WeakLossConfig(size_domain="x")],
    )
    def test_invalid_config(self, cfg):
        with pytest.raises(ValueError):
            cfg.validate()

    def test_gradients_float64(self):
        rng = np.random.default_rng(4)
        with dc.check_mode():
            logits = dc.parameter(rng.normal(size=(6, 2, 4, 4)))
            ann = random_annotations(rng, 2, 4, 4, density=0.4)
            ann[0, 1, 1] = 1
            tags = batch_tags(ann)
            report = dc.grad_check(
                lambda: weak_loss(dc.softmax_channels(logits), ann, tags, WeakLossConfig(lam=1e-2)), logits
            )
        assert report.passed, report


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_mass_is_conserved(seed):
    # softmax outputs distribute exactly |domain| units of mass over the six classes
    rng = np.random.default_rng(seed)
    S = random_probs(rng, (6, 2, 5, 7))
    assert S.sum(axis=(0, 2, 3)) == pytest.approx([35.0, 35.0])
    with dc.check_mode():
        V = dc.tsum(dc.softmax_channels(np.log(S)), axis=(2, 3)).data
    np.testing.assert_allclose(V.sum(axis=0), 35.0)


class TestSupervised:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        w = supervised_class_weights(WeakLossConfig())
        with dc.check_mode():
            for _ in range(10):
                S = random_probs(rng, (6, 2, 5, 5))
                truth = rng.integers(0, 6, (2, 5, 5))
                got = supervised_loss(S, truth, w).item()
                assert got == pytest.approx(supervised_loss_loop(S, truth, w), rel=1e-9)

    def test_one_hot_prediction(self):
        truth = np.random.default_rng(0).integers(0, 6, (1, 8, 8))
        S = np.stack([truth == c for c in range(6)]).astype(float)
        w = supervised_class_weights(WeakLossConfig())
        with dc.check_mode():
            ce = supervised_loss(S, truth, np.zeros(6)).item()
            full = supervised_loss(S, truth, w).item()
        assert abs(ce) <= 1e-3  # Dice term only
        assert full - ce == pytest.approx(0.0, abs=1e-12)

    def test_uniform_single_class(self):
        truth = np.zeros((1, 4, 4), int)
        S = np.full((6, 1, 4, 4), 1 / 6)
        w = supervised_class_weights(WeakLossConfig())
        with dc.check_mode():
            total = supervised_loss(S, truth, w).item()
        dice = (2 * 16 / 6 + 1) / (16 / 6 + 16 + 1)
        assert total == pytest.approx(math.log(6) * 0.12 + 1 - dice)

    def test_background_weight(self):
        np.testing.assert_allclose(supervised_class_weights(WeakLossConfig()), [0.12, 0.12, 0.22, 0.22, 0.22, 0.22])

    def test_gradients_float64(self):
        rng = np.random.default_rng(6)
        with dc.check_mode():
            logits = dc.parameter(rng.normal(size=(6, 2, 3, 3)))
            truth = rng.integers(0, 6, (2, 3, 3))
            w = supervised_class_weights(WeakLossConfig())
            report = dc.grad_check(lambda: supervised_loss(dc.softmax_channels(logits), truth, w), logits)
        assert report.passed, report
