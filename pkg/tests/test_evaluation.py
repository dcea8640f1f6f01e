import numpy as np
import pytest

from fuse_ser.data import ExampleSet
from fuse_ser.evaluation import evaluate, read_confusion, read_residuals, write_report
from fuse_ser.metrics import ccc, pcc, residual_fit
from fuse_ser.models import Model, ModelSpec

SPEC = ModelSpec(backbone_channels=(4, 8), n_mels=8, embedding_dim=4)


def warmed(spec, x):
    m = Model(spec, seed=0)
    m(x, np.zeros((len(x), 4), np.float32), train=True)
    return m


@pytest.fixture
def xs():
    return np.random.default_rng(0).standard_normal((12, 8, 8)).astype(np.float32)


def test_classification_report(tmp_path, xs):
    model = warmed(SPEC, xs)
    data = ExampleSet([f"u{i}" for i in range(12)], xs, labels=np.arange(12) % 4)
    rep = evaluate(model, data, "four_class")
    assert rep.headline == "uar" and rep.confusion.counts.shape == (4, 4)
    assert rep.confusion.counts.sum() == 12
    write_report(rep, tmp_path)
    assert np.array_equal(read_confusion(tmp_path / "confusion.csv").counts, rep.confusion.counts)
    assert (tmp_path / "predictions.csv").read_text().startswith("id,true,predicted")


def test_regression_report_and_cross_corpus(tmp_path, xs):
    model = warmed(SPEC.replace(head="multitask_regression"), xs)
    targets = np.random.default_rng(1).uniform(1, 7, (12, 3)).astype(np.float32)
    data = ExampleSet([f"u{i}" for i in range(12)], xs, targets=targets)
    rep = evaluate(model, data, "multitask")
    preds = model(xs).data.astype(np.float64)
    for d, name in enumerate(("arousal", "valence", "dominance")):
        assert rep.metrics[f"{name}_ccc"] == pytest.approx(ccc(preds[:, d], targets[:, d]), abs=1e-6)
        assert rep.metrics[f"{name}_pcc"] == pytest.approx(pcc(preds[:, d], targets[:, d]), abs=1e-6)
        slope, _ = residual_fit(y_true=targets[:, d], y_pred=preds[:, d])
        assert rep.residual_fits[name]["slope"] == pytest.approx(slope, abs=1e-6)
    assert rep.headline == "ccc"
    assert evaluate(model, data, "multitask", cross_corpus=True).headline == "pcc"
    write_report(rep, tmp_path)
    back = read_residuals(tmp_path / "residuals.csv")
    np.testing.assert_allclose(back["valence"][0], targets[:, 1], rtol=1e-6)


def test_task_and_head_must_agree(xs):
    model = warmed(SPEC, xs)
    with pytest.raises(ValueError):
        evaluate(model, ExampleSet(["a"], xs[:1], targets=np.ones((1, 3))), "multitask")
