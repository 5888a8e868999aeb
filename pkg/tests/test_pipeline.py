import json

import numpy as np
import pytest

from weakseg import diffcore as dc
from weakseg.evaluation import quadratic_kappa
from weakseg.losses import WeakLossConfig
from weakseg.phantom import PhantomConfig, generate_dataset
from weakseg.pipeline import (
    EvalConfig,
    ScribbleConfig,
    aggregate,
    compare_regimes,
    evaluate,
    patients_from_samples,
    run_one,
)
from weakseg.trainer import TrainConfig
from weakseg.unet import UNetConfig


@pytest.fixture(scope="module")
def small_dataset():
    samples, manifest = generate_dataset(PhantomConfig(n_patients=4, grid_shape=(8, 48, 48)))
    return manifest, patients_from_samples(samples, manifest, ScribbleConfig(), 0)


class _Oracle:
    """Predicts the ground truth of a fixed patient list in order."""

    training = False

    def __init__(self, truths):
        self.slices = [s for t in truths for s in t]

    def eval(self):
        return self

    def train(self, mode=True):
        return self

    def forward(self, x):
        n = x.shape[1]
        labels = np.stack(self.slices[:n])
        del self.slices[:n]
        probs = np.stack([labels == c for c in range(6)]).astype(np.float32)
        return dc.Tensor(probs)


def test_perfect_prediction_report(small_dataset):
    _, patients = small_dataset
    report, curve, _ = evaluate(_Oracle(p.truth.labels for p in patients), patients)
    assert report["dice_prostate"] == pytest.approx(1.0)
    assert report["predicted_foreground_ratio"] == pytest.approx(1.0)
    assert report["kappa"] == pytest.approx(1.0)
    assert report["sensitivity_at_2fp"] == pytest.approx(1.0)
    assert quadratic_kappa(np.array(report["confusion"])) == pytest.approx(report["kappa"])
    json.dumps(report)


def test_centroid_protocol_perfect(small_dataset):
    _, patients = small_dataset
    report, curve, _ = evaluate(_Oracle(p.truth.labels for p in patients), patients, "centroid")
    assert curve is None
    assert report["kappa"] == pytest.approx(1.0)
    assert np.trace(np.array(report["confusion"])) == sum(len(p.centers) for p in patients)


def test_unknown_protocol(small_dataset):
    with pytest.raises(ValueError):
        evaluate(None, small_dataset[1], "public")


def test_run_one_is_deterministic(small_dataset):
    manifest, patients = small_dataset
    args = (UNetConfig(base_width=2), TrainConfig(max_epochs=1, folds=2, batch_size=4), WeakLossConfig(), EvalConfig())
    a = run_one(patients, manifest, "partial-ce-tags", 1, 0, *args)
    b = run_one(patients, manifest, "partial-ce-tags", 1, 0, *args)
    assert json.dumps(a.report) == json.dumps(b.report)
    assert (a.regime, a.fold, a.replicate) == ("partial-ce-tags", 1, 0)
    c = run_one(patients, manifest, "partial-ce-tags", 1, 1, *args)
    assert not np.array_equal(a.model.params["head.w"].data, c.model.params["head.w"].data)


def test_aggregate_matches_recomputation():
    rng = np.random.default_rng(0)
    reports = [
        {"kappa": float(k), "sensitivity_at_2fp": float(s), "dice_prostate": float(d), "predicted_foreground_ratio": 1.0}
        for k, s, d in rng.random((7, 3))
    ]
    reports[2]["kappa"] = None
    out = aggregate(reports)
    kappas = [r["kappa"] for r in reports if r["kappa"] is not None]
    assert out["kappa"]["n"] == 6
    assert out["kappa"]["mean"] == pytest.approx(sum(kappas) / 6)
    assert out["kappa"]["std"] == pytest.approx(np.sqrt(np.mean((np.array(kappas) - np.mean(kappas)) ** 2)))
    assert out["predicted_foreground_ratio"]["std"] == 0.0


def test_compare_regimes():
    rng = np.random.default_rng(1)
    a = [{"kappa": float(v)} for v in rng.random(8)]
    b = [{"kappa": r["kappa"] + 0.5 + 0.01 * i} for i, r in enumerate(a)]
    out = compare_regimes({"x": a, "y": b})
    assert list(out) == ["x vs y"]
    assert out["x vs y"]["p_value"] < 0.05
    out = compare_regimes({"x": a[:3], "y": b[:3]})
    assert out["x vs y"]["p_value"] is None
    out = compare_regimes({"x": a, "y": [{"kappa": None}] * 8})
    assert out["x vs y"]["p_value"] is None
