import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuse_ser.models import (
    DEFAULT_CHANNELS, Model, ModelSpec, conv_block, count_parameters, late_fuse, load_checkpoint, save_checkpoint,
)
from fuse_ser.tensor import DimensionError, Tensor

TINY = ModelSpec(backbone_channels=(4, 8), n_mels=8, embedding_dim=6)


def inputs(n, t=8, f=8, d=6, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, t, f)).astype(np.float32), rng.standard_normal((n, d)).astype(np.float32)


def warm(model, x, e):
    model(x, e, train=True)
    return model


@pytest.mark.parametrize("fusion", ["none", "single_stage", "multistage"])
@pytest.mark.parametrize("head, k", [("classification", 4), ("multitask_regression", 3), ("regression", 1)])
def test_output_shapes(fusion, head, k):
    x, e = inputs(5)
    out = Model(TINY.replace(fusion=fusion, head=head))(x, e, train=True)
    assert out.shape == (5, k)


def test_block_halves_extent():
    from fuse_ser.models import make_block
    p = make_block(np.random.default_rng(0), 1, 4, None)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 8, 8)).astype(np.float32))
    assert conv_block(x, p, train=True).shape == (2, 4, 4, 4)


def shared_cnn14(fused: Model) -> Model:
    base = Model(fused.spec.replace(fusion="none"), seed=99)
    base.load_state_dict(fused.state_dict())
    return base


@pytest.mark.parametrize("fusion", ["single_stage", "multistage"])
def test_zero_projection_reduces_to_cnn14_bitwise(fusion):
    model = Model(TINY.replace(fusion=fusion), seed=3)
    model.zero_projections()
    base = shared_cnn14(model)
    for trial in range(10):
        x, e = inputs(4, seed=trial)
        e = e * 100
        a = model(x, e, train=True).data
        b = base(x, train=True).data
        assert a.tobytes() == b.tobytes()
        assert model(x, e).data.tobytes() == base(x).data.tobytes()


@pytest.mark.parametrize("fusion", ["single_stage", "multistage"])
def test_embeddings_change_the_output(fusion):
    model = Model(TINY.replace(fusion=fusion), seed=1)
    x, e = inputs(3)
    warm(model, x, e)
    a = model(x, e).data
    b = model(x, e + 1.0).data
    assert not np.allclose(a, b)


@settings(max_examples=15)
@given(st.permutations(range(5)), st.sampled_from(["none", "single_stage", "multistage"]))
def test_batch_permutation_equivariance(perm, fusion):
    model = Model(TINY.replace(fusion=fusion), seed=2)
    x, e = inputs(5)
    warm(model, x, e)
    perm = list(perm)
    np.testing.assert_allclose(model(x[perm], e[perm]).data, model(x, e).data[perm], rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(
        model(x[perm], e[perm], train=True).data, model(x, e, train=True).data[perm], rtol=1e-4, atol=1e-5
    )


def test_eval_is_deterministic():
    model = Model(TINY.replace(fusion="multistage", dropout=0.3), seed=2)
    x, e = inputs(4)
    warm(model, x, e)
    assert model(x, e).data.tobytes() == model(x, e).data.tobytes()


def test_same_seed_same_initialisation():
    a, b = Model(TINY, seed=5), Model(TINY, seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


@pytest.mark.parametrize("fusion", ["none", "single_stage", "multistage"])
def test_closed_form_count_matches_instance(fusion):
    spec = ModelSpec(fusion=fusion, embedding_dim=32).with_width(1 / 8)
    assert count_parameters(spec) == Model(spec).n_parameters()


def test_default_spec_fusion_overheads():
    cnn = count_parameters(ModelSpec())
    # one (C x 768) projection plus bias per block, or one after pooling
    assert count_parameters(ModelSpec(fusion="multistage")) - cnn == sum(c * 768 + c for c in DEFAULT_CHANNELS)
    assert count_parameters(ModelSpec(fusion="single_stage")) - cnn == 2048 * 768 + 2048
    assert sum(c * 769 for c in DEFAULT_CHANNELS) == 3100608


def test_input_validation():
    model = Model(TINY.replace(fusion="multistage"))
    x, e = inputs(2)
    with pytest.raises(DimensionError) as exc:
        model(np.zeros((2, 8, 7), np.float32), e)
    assert exc.value.axis == "F"
    with pytest.raises(DimensionError) as exc:
        model(np.zeros((2, 3, 8), np.float32), e)
    assert exc.value.axis == "T"
    with pytest.raises(DimensionError) as exc:
        model(x, np.zeros((2, 5), np.float32))
    assert exc.value.axis == "L_dim"
    with pytest.raises(ValueError):
        model(x)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(fusion="late")
    with pytest.raises(ValueError):
        ModelSpec(backbone_channels=(8, 4))
    with pytest.raises(ValueError):
        ModelSpec(dropout=1.0)
    with pytest.raises(ValueError):
        ModelSpec.from_dict({"bogus": 1})
    assert ModelSpec.from_dict(TINY.to_dict()) == TINY


def test_eval_before_training_raises():
    from fuse_ser.ops import UninitializedStatisticsError
    x, _ = inputs(2)
    with pytest.raises(UninitializedStatisticsError):
        Model(TINY)(x)


def test_checkpoint_round_trip(tmp_path):
    model = Model(TINY.replace(fusion="multistage"), seed=4)
    x, e = inputs(3)
    warm(model, x, e)
    save_checkpoint(tmp_path / "m.ckpt", model, {"epoch": 7})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"epoch": 7} and back.spec == model.spec
    assert back(x, e).data.tobytes() == model(x, e).data.tobytes()
    assert back.bn_tracked() == model.bn_tracked()


def test_late_fusion_classification_averages_probabilities():
    a = np.array([[np.log(3.0), 0.0]])
    b = np.array([[0.0, 0.0]])
    np.testing.assert_allclose(late_fuse(a, b, "classification"), [[0.625, 0.375]])
    np.testing.assert_allclose(late_fuse(a, b, "classification").sum(axis=1), 1.0)


def test_late_fusion_regression_and_errors():
    np.testing.assert_allclose(late_fuse([1.0, 2.0], [3.0, 4.0], "regression"), [2.0, 3.0])
    with pytest.raises(DimensionError):
        late_fuse([1.0], [1.0, 2.0], "regression")
    with pytest.raises(ValueError):
        late_fuse([1.0], [1.0], "ranking")


@given(st.lists(st.floats(-30, 30), min_size=4, max_size=4), st.lists(st.floats(-30, 30), min_size=4, max_size=4))
def test_late_fusion_is_a_distribution(a, b):
    p = late_fuse([a], [b], "classification")
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(p, late_fuse([b], [a], "classification"))
