"""Central finite-difference checks of every differentiable op and model.

All checks run in float64. The scalar probed is ``sum(out * R)`` for a fixed
random ``R`` so that every output element contributes with a distinct weight.
The error reported per tensor is

    max|analytic - numeric| / max(max|numeric|, max|analytic|, floor)

with ``floor = max(1e-6, 1e-4 * G)`` and ``G`` the largest analytic gradient
entry over all tensors of the case. A case passes when the worst tensor stays
below the tolerance. The floor keeps tensors whose true gradient is zero (a
conv bias feeding batch norm) from comparing rounding noise against rounding
noise.

Single ops use a step of 1e-3. Composite graphs (blocks, whole models) use
1e-6, and 1e-7 for the default-size models, because a larger step moves
enough ReLU and max-pool inputs across their kinks to swamp the comparison.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from . import losses, models, ops, tensor
from .models import ConvBlockParams, Model, ModelSpec
from .ops import BatchNormState
from .tensor import Tensor

STEP = 1e-3
COMPOSITE_STEP = 1e-6
LARGE_MODEL_STEP = 1e-7
TOLERANCE = 1e-3
SCALE_FLOOR = 1e-6
FLOOR_FRACTION = 1e-4


@dataclass
class CheckResult:
    name: str
    errors: dict  # tensor name -> relative error
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst)) and self.worst < self.tolerance


@dataclass
class SuiteReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list:
        return [r for r in self.results if not r.passed]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = SCALE_FLOOR) -> float:
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check(
    name: str,
    forward: Callable[[], Tensor],
    leaves: dict,
    step: float = STEP,
    tolerance: float = TOLERANCE,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> CheckResult:
    """Compare backprop against central differences for each leaf tensor.

    ``forward`` rebuilds the graph from ``leaves`` (float64 tensors that
    require grad) on every call. ``max_entries`` caps how many coordinates
    per tensor are probed, chosen at random.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    out = forward()
    weights = rng.standard_normal(out.shape)
    for t in leaves.values():
        t.grad = None
    (out * weights).sum().backward()

    def probe() -> float:
        return float((forward().data * weights).sum())

    largest = max((float(np.abs(t.grad).max(initial=0.0)) for t in leaves.values() if t.grad is not None), default=0.0)
    floor = max(SCALE_FLOOR, FLOOR_FRACTION * largest)
    errors = {}
    for key, t in leaves.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(coords.size)
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            up = probe()
            flat[i] = orig - step
            down = probe()
            flat[i] = orig
            numeric[k] = (up - down) / (2 * step)
        errors[key] = relative_error(analytic.reshape(-1)[coords], numeric, floor)
    return CheckResult(name, errors, time.perf_counter() - start, tolerance)


# ------------------------------------------------------------------ cases


def _leaf(rng: np.random.Generator, *shape, scale: float = 1.0, away_from_zero: bool = False) -> Tensor:
    a = rng.standard_normal(shape) * scale
    if away_from_zero:
        # keep every entry at least 0.1 from the kink so the step cannot cross it
        a = np.where(a >= 0, a + 0.1, a - 0.1)
    return Tensor(a, requires_grad=True)


def _distinct(rng: np.random.Generator, *shape) -> Tensor:
    # a permutation of well-separated values: no ties inside any pooling window
    size = int(np.prod(shape))
    return Tensor(rng.permutation(size).reshape(shape) * 0.01 - size * 0.005, requires_grad=True)


def _op_cases(rng: np.random.Generator) -> Iterator[tuple]:
    a, b = _leaf(rng, 3, 4), _leaf(rng, 1, 4)
    yield "add", lambda: a + b, {"a": a, "b": b}
    yield "sub", lambda: a - b, {"a": a, "b": b}
    yield "mul", lambda: a * b, {"a": a, "b": b}
    d = Tensor(rng.uniform(0.5, 2.0, (3, 1)), requires_grad=True)
    yield "div", lambda: a / d, {"a": a, "d": d}
    p = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    yield "pow", lambda: p ** 2.5, {"p": p}
    yield "sqrt", lambda: tensor.sqrt(p), {"p": p}
    c = _leaf(rng, 2, 3, 4)
    yield "sum", lambda: c.sum(axis=1), {"c": c}
    yield "mean", lambda: c.mean(axis=(0, 2), keepdims=True), {"c": c}
    yield "reshape", lambda: c.reshape(6, 4), {"c": c}
    yield "getitem", lambda: c[:, [0, 0, 2], 1:3], {"c": c}
    yield "log_softmax", lambda: tensor.log_softmax(a), {"a": a}
    e = _leaf(rng, 3, 4)
    yield "stack_rows", lambda: tensor.stack_rows([a, e]), {"a": a, "e": e}

    x = _leaf(rng, 2, 3, 6, 5)
    w = _leaf(rng, 4, 3, 3, 3, scale=0.3)
    bias = _leaf(rng, 4)
    yield "conv2d", lambda: ops.conv2d(x, w, bias, padding=1), {"x": x, "w": w, "b": bias}
    yield "conv2d_strided", lambda: ops.conv2d(x, w, bias, stride=2), {"x": x, "w": w, "b": bias}

    xb = _leaf(rng, 3, 2, 4, 3)
    gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    beta = _leaf(rng, 2)
    st = BatchNormState.create(2, np.float64)
    yield "batchnorm2d_train", lambda: ops.batchnorm2d(xb, gamma, beta, st, True), {"x": xb, "gamma": gamma, "beta": beta}
    st_eval = BatchNormState(rng.standard_normal(2), rng.uniform(0.5, 2.0, 2), num_batches_tracked=1)
    yield "batchnorm2d_eval", lambda: ops.batchnorm2d(xb, gamma, beta, st_eval, False), {"x": xb, "gamma": gamma, "beta": beta}

    r = _leaf(rng, 3, 5, away_from_zero=True)
    yield "relu", lambda: ops.relu(r), {"x": r}
    mp = _distinct(rng, 2, 2, 5, 7)
    yield "maxpool2d", lambda: ops.maxpool2d(mp, (2, 2)), {"x": mp}
    yield "global_pool", lambda: ops.global_pool(mp), {"x": mp}

    xl, wl, bl = _leaf(rng, 4, 5), _leaf(rng, 3, 5), _leaf(rng, 3)
    yield "linear", lambda: ops.linear(xl, wl, bl), {"x": xl, "w": wl, "b": bl}
    maps, vec = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3)
    yield "broadcast_add_channels", lambda: ops.broadcast_add_channels(maps, vec), {"maps": maps, "vec": vec}
    yield (
        "dropout",
        lambda: ops.dropout(xl, 0.5, np.random.default_rng(7), True),
        {"x": xl},
    )

    logits = _leaf(rng, 6, 4)
    labels = np.array([0, 1, 2, 3, 1, 1])
    cw = losses.class_weights([1, 3, 1, 1])
    yield "weighted_cross_entropy", lambda: losses.weighted_cross_entropy(logits, labels, cw), {"logits": logits}
    pred, target = _leaf(rng, 8, 3), rng.standard_normal((8, 3))
    yield "mse_loss", lambda: losses.mse_loss(pred, target), {"pred": pred}
    yield "ccc_loss", lambda: losses.ccc_loss(pred, target), {"pred": pred}


def _block_params(rng: np.random.Generator, c_in: int, c_out: int, emb_dim: Optional[int]) -> ConvBlockParams:
    p = models.make_block(rng, c_in, c_out, emb_dim)
    for name in ("conv1_w", "conv1_b", "bn1_gamma", "bn1_beta", "conv2_w", "conv2_b",
                 "bn2_gamma", "bn2_beta", "proj_w", "proj_b"):
        t = getattr(p, name)
        if t is not None:
            arr = t.data.astype(np.float64)
            if name.endswith("_b") or name.endswith("beta"):
                arr = rng.standard_normal(arr.shape) * 0.1
            setattr(p, name, Tensor(arr, requires_grad=True))
    p.bn1 = BatchNormState.create(c_out, np.float64)
    p.bn2 = BatchNormState.create(c_out, np.float64)
    return p


def _block_leaves(p: ConvBlockParams) -> dict:
    names = ("conv1_w", "conv1_b", "bn1_gamma", "bn1_beta", "conv2_w", "conv2_b",
             "bn2_gamma", "bn2_beta", "proj_w", "proj_b")
    return {n: getattr(p, n) for n in names if getattr(p, n) is not None}


def _block_cases(rng: np.random.Generator) -> Iterator[tuple]:
    x = _leaf(rng, 3, 2, 6, 6)
    p = _block_params(rng, 2, 4, None)
    yield "conv_block", lambda: models.conv_block(x, p, True), {"x": x, **_block_leaves(p)}
    emb = _leaf(rng, 3, 5)
    q = _block_params(rng, 2, 4, 5)
    yield (
        "conditioned_conv_block",
        lambda: models.conditioned_conv_block(x, q, emb, True),
        {"x": x, "emb": emb, **_block_leaves(q)},
    )


TINY_SPEC = ModelSpec(backbone_channels=(4, 8), n_mels=8, embedding_dim=8)


def architecture_specs(which: str = "tiny") -> list[tuple[str, ModelSpec]]:
    if which not in ("tiny", "default"):
        raise ValueError(f"unknown gradcheck spec {which!r}; use 'tiny' or 'default'")
    base = TINY_SPEC if which == "tiny" else ModelSpec(embedding_dim=16).with_width(1 / 16)
    return [
        ("cnn14", base.replace(fusion="none")),
        ("sfcnn14", base.replace(fusion="single_stage")),
        ("mfcnn14", base.replace(fusion="multistage")),
        ("mfcnn14_multitask", base.replace(fusion="multistage", head="multitask_regression")),
    ]


def _model_case(name: str, spec: ModelSpec, rng: np.random.Generator, n: int = 3) -> tuple:
    model = Model(spec, rng).copy(np.float64)
    for pname, t in model.named_parameters():
        if pname.endswith(".bias") or pname.endswith(".beta"):
            # nonzero offsets so bias gradients are not trivially symmetric
            t.data[...] = rng.standard_normal(t.shape) * 0.1
    side = max(spec.min_input_extent * 2, spec.n_mels)
    x = _leaf(rng, n, side, spec.n_mels)
    emb = _leaf(rng, n, spec.embedding_dim)
    leaves = {"x": x, **dict(model.named_parameters())}
    if spec.fusion != "none":
        leaves["emb"] = emb
    return name, lambda: model(x, emb, train=True), leaves


def run_suite(which: str = "tiny", seed: int = 0, step: float = STEP, composite_step: float = COMPOSITE_STEP,
              tolerance: float = TOLERANCE, on_result: Optional[Callable[[CheckResult], None]] = None) -> SuiteReport:
    """Every op, both block types and the architectures of ``which`` size.

    The ``default`` size probes a random subset of coordinates per tensor to
    stay within a few minutes.
    """
    specs = architecture_specs(which)
    rng = np.random.default_rng(seed)
    report = SuiteReport()
    cases = [(c, step) for c in _op_cases(rng)]
    cases += [(c, composite_step) for c in _block_cases(rng)]
    arch_step = composite_step if which == "tiny" else min(composite_step, LARGE_MODEL_STEP)
    cases += [(_model_case(f"arch:{n}", s, rng), arch_step) for n, s in specs]
    for (name, fwd, leaves), h in cases:
        cap = 6 if which == "default" and name.startswith("arch:") else None
        res = check(name, fwd, leaves, h, tolerance, max_entries=cap, seed=seed)
        report.results.append(res)
        if on_result is not None:
            on_result(res)
    return report


@contextlib.contextmanager
def corrupted_backward(op: str, factor: float = 1.5):
    """Test hook: scale the first input gradient of ``op`` by ``factor``.

    A correct suite must flag every case that routes through ``op``.
    """
    module = ops if hasattr(ops, op) else tensor
    original = getattr(module, op)

    def wrapped(*args, **kwargs):
        out = original(*args, **kwargs)
        inner = out._backward
        if inner is not None:
            def bad(g):
                grads = list(inner(g))
                if grads and grads[0] is not None:
                    grads[0] = grads[0] * factor
                return tuple(grads)
            out._backward = bad
        return out

    setattr(module, op, wrapped)
    try:
        yield
    finally:
        setattr(module, op, original)


__all__ = [
    "COMPOSITE_STEP", "CheckResult", "STEP", "SuiteReport", "TINY_SPEC", "TOLERANCE", "architecture_specs", "check",
    "corrupted_backward", "relative_error", "run_suite",
]
