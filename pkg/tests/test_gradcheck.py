import numpy as np
import pytest

from fuse_ser import gradcheck
from fuse_ser.tensor import Tensor


def test_relative_error_uses_the_scale_floor():
    assert gradcheck.relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-3)
    assert gradcheck.relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


def test_check_accepts_a_correct_gradient():
    x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
    assert gradcheck.check("cube", lambda: (x * x * x).sum(), {"x": x}).passed


@pytest.mark.parametrize("op", ["conv2d", "batchnorm2d", "maxpool2d"])
def test_corrupted_backward_is_caught(op):
    with gradcheck.corrupted_backward(op):
        report = gradcheck.run_suite("tiny")
    names = [r.name for r in report.failures()]
    assert names, f"corrupting {op} went unnoticed"


def test_corruption_is_undone():
    with gradcheck.corrupted_backward("relu"):
        pass
    assert gradcheck.run_suite("tiny").passed


def test_unknown_spec():
    with pytest.raises(ValueError):
        gradcheck.architecture_specs("huge")
