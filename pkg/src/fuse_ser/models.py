"""CNN14, SFCNN14 and MFCNN14 built on the autodiff engine.

All three share one backbone: a stack of conv blocks
(conv-BN-ReLU twice, then 2x2 max pooling), global mean+max pooling, a hidden
linear layer with ReLU and a linear head. The fusion variants add a projected
linguistic embedding as a per-channel shift: after every block (multistage) or
once on the pooled acoustic embedding (single stage).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import ops
from .framing import read_framed, write_framed
from .ops import BatchNormState
from .tensor import DimensionError, Tensor, as_tensor

FUSIONS = ("none", "single_stage", "multistage")
HEADS = ("classification", "regression", "multitask_regression")
DEFAULT_CHANNELS = (64, 128, 256, 512, 1024, 2048)


@dataclass(frozen=True)
class ModelSpec:
    backbone_channels: tuple = DEFAULT_CHANNELS
    n_mels: int = 64
    fusion: str = "none"
    embedding_dim: int = 768
    head: str = "classification"
    n_classes: int = 4
    hidden_dim: Optional[int] = None
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))
        chans = self.backbone_channels
        if not chans or any(c < 1 for c in chans):
            raise ValueError(f"backbone channel widths must be positive, got {chans}")
        if any(b < a for a, b in zip(chans, chans[1:])):
            raise ValueError(f"backbone channel widths must be nondecreasing, got {chans}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.embedding_dim < 1 or self.n_mels < 1:
            raise ValueError("embedding_dim and n_mels must be positive")
        if self.head == "classification" and self.n_classes < 1:
            raise ValueError("classification head needs n_classes >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def n_blocks(self) -> int:
        return len(self.backbone_channels)

    @property
    def pooled_dim(self) -> int:
        return self.backbone_channels[-1]

    @property
    def hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else self.pooled_dim

    @property
    def n_outputs(self) -> int:
        return {"classification": self.n_classes, "regression": 1, "multitask_regression": 3}[self.head]

    @property
    def min_input_extent(self) -> int:
        return 2 ** self.n_blocks

    def with_width(self, multiplier: float) -> "ModelSpec":
        chans = tuple(max(1, int(round(c * multiplier))) for c in self.backbone_channels)
        hidden = None if self.hidden_dim is None else max(1, int(round(self.hidden_dim * multiplier)))
        return ModelSpec(**{**self.to_dict(), "backbone_channels": chans, "hidden_dim": hidden})

    def replace(self, **changes) -> "ModelSpec":
        return ModelSpec(**{**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**known)


@dataclass
class ConvBlockParams:
    conv1_w: Tensor
    conv1_b: Tensor
    bn1_gamma: Tensor
    bn1_beta: Tensor
    bn1: BatchNormState
    conv2_w: Tensor
    conv2_b: Tensor
    bn2_gamma: Tensor
    bn2_beta: Tensor
    bn2: BatchNormState
    proj_w: Optional[Tensor] = None
    proj_b: Optional[Tensor] = None

    @property
    def out_channels(self) -> int:
        return self.conv2_w.shape[0]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def make_block(rng: np.random.Generator, c_in: int, c_out: int, embedding_dim: Optional[int]) -> ConvBlockParams:
    block = ConvBlockParams(
        conv1_w=_uniform(rng, (c_out, c_in, 3, 3), c_in * 9),
        conv1_b=_zeros(c_out),
        bn1_gamma=_ones(c_out),
        bn1_beta=_zeros(c_out),
        bn1=BatchNormState.create(c_out),
        conv2_w=_uniform(rng, (c_out, c_out, 3, 3), c_out * 9),
        conv2_b=_zeros(c_out),
        bn2_gamma=_ones(c_out),
        bn2_beta=_zeros(c_out),
        bn2=BatchNormState.create(c_out),
    )
    if embedding_dim is not None:
        block.proj_w = _uniform(rng, (c_out, embedding_dim), embedding_dim)
        block.proj_b = _zeros(c_out)
    return block


def conv_block(x: Tensor, p: ConvBlockParams, train: bool) -> Tensor:
    h = ops.relu(ops.batchnorm2d(ops.conv2d(x, p.conv1_w, p.conv1_b, padding=1), p.bn1_gamma, p.bn1_beta, p.bn1, train))
    h = ops.relu(ops.batchnorm2d(ops.conv2d(h, p.conv2_w, p.conv2_b, padding=1), p.bn2_gamma, p.bn2_beta, p.bn2, train))
    return ops.maxpool2d(h, (2, 2))


def conditioned_conv_block(x: Tensor, p: ConvBlockParams, emb: Tensor, train: bool) -> Tensor:
    if p.proj_w is None:
        raise ValueError("block has no projection parameters")
    emb = as_tensor(emb)
    if emb.ndim != 2 or emb.shape[1] != p.proj_w.shape[1]:
        raise DimensionError(
            f"embedding shape {emb.shape} does not match projection input {p.proj_w.shape[1]}",
            axis="L_dim",
        )
    return ops.broadcast_add_channels(conv_block(x, p, train), ops.linear(emb, p.proj_w, p.proj_b))


class Model:
    """Parameters and running statistics of one architecture instance."""

    def __init__(self, spec: ModelSpec, seed: int | np.random.Generator = 0):
        self.spec = spec
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        per_block_dim = spec.embedding_dim if spec.fusion == "multistage" else None
        self.blocks: list[ConvBlockParams] = []
        c_in = 1
        for c_out in spec.backbone_channels:
            self.blocks.append(make_block(rng, c_in, c_out, per_block_dim))
            c_in = c_out
        self.fusion_w: Optional[Tensor] = None
        self.fusion_b: Optional[Tensor] = None
        if spec.fusion == "single_stage":
            self.fusion_w = _uniform(rng, (spec.pooled_dim, spec.embedding_dim), spec.embedding_dim)
            self.fusion_b = _zeros(spec.pooled_dim)
        self.fc1_w = _uniform(rng, (spec.hidden, spec.pooled_dim), spec.pooled_dim)
        self.fc1_b = _zeros(spec.hidden)
        self.head_w = _uniform(rng, (spec.n_outputs, spec.hidden), spec.hidden)
        self.head_b = _zeros(spec.n_outputs)
        self.dropout_rng = np.random.default_rng(rng.integers(2**63))

    # ------------------------------------------------------------- registry

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, b in enumerate(self.blocks):
            for j in (1, 2):
                out += [
                    (f"block{i}.conv{j}.weight", getattr(b, f"conv{j}_w")),
                    (f"block{i}.conv{j}.bias", getattr(b, f"conv{j}_b")),
                    (f"block{i}.bn{j}.gamma", getattr(b, f"bn{j}_gamma")),
                    (f"block{i}.bn{j}.beta", getattr(b, f"bn{j}_beta")),
                ]
            if b.proj_w is not None:
                out += [(f"block{i}.proj.weight", b.proj_w), (f"block{i}.proj.bias", b.proj_b)]
        if self.fusion_w is not None:
            out += [("fusion.proj.weight", self.fusion_w), ("fusion.proj.bias", self.fusion_b)]
        out += [
            ("fc1.weight", self.fc1_w),
            ("fc1.bias", self.fc1_b),
            ("head.weight", self.head_w),
            ("head.bias", self.head_b),
        ]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def projection_parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if ".proj." in name]

    def bn_states(self) -> list[tuple[str, BatchNormState]]:
        return [(f"block{i}.bn{j}", getattr(b, f"bn{j}")) for i, b in enumerate(self.blocks) for j in (1, 2)]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, st in self.bn_states():
            state[f"{name}.running_mean"] = st.running_mean.copy()
            state[f"{name}.running_var"] = st.running_var.copy()
        return state

    def bn_tracked(self) -> dict[str, int]:
        return {name: st.num_batches_tracked for name, st in self.bn_states()}

    def load_state_dict(self, state: dict[str, np.ndarray], tracked: Optional[dict[str, int]] = None) -> None:
        expected = self.state_dict()
        missing = set(expected) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.data.shape:
                raise DimensionError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, st in self.bn_states():
            st.running_mean[...] = state[f"{name}.running_mean"]
            st.running_var[...] = state[f"{name}.running_var"]
            if tracked is not None:
                st.num_batches_tracked = int(tracked.get(name, 0))

    def copy(self, dtype=None) -> "Model":
        """Deep copy, optionally casting every array (e.g. to float64)."""
        clone = Model.__new__(Model)
        clone.spec = self.spec
        clone.dropout_rng = np.random.default_rng(0)
        clone.blocks = []

        def cp(t: Optional[Tensor]) -> Optional[Tensor]:
            if t is None:
                return None
            arr = t.data.astype(dtype) if dtype is not None else t.data.copy()
            return Tensor(arr, requires_grad=True)

        for b in self.blocks:
            states = []
            for st in (b.bn1, b.bn2):
                mean = st.running_mean.astype(dtype) if dtype is not None else st.running_mean.copy()
                var = st.running_var.astype(dtype) if dtype is not None else st.running_var.copy()
                states.append(BatchNormState(mean, var, st.num_batches_tracked, st.momentum, st.eps))
            clone.blocks.append(ConvBlockParams(
                cp(b.conv1_w), cp(b.conv1_b), cp(b.bn1_gamma), cp(b.bn1_beta), states[0],
                cp(b.conv2_w), cp(b.conv2_b), cp(b.bn2_gamma), cp(b.bn2_beta), states[1],
                cp(b.proj_w), cp(b.proj_b),
            ))
        clone.fusion_w, clone.fusion_b = cp(self.fusion_w), cp(self.fusion_b)
        clone.fc1_w, clone.fc1_b = cp(self.fc1_w), cp(self.fc1_b)
        clone.head_w, clone.head_b = cp(self.head_w), cp(self.head_b)
        return clone

    def zero_projections(self) -> None:
        for p in self.projection_parameters():
            p.data[...] = 0

    # -------------------------------------------------------------- forward

    def _prepare_input(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
        if x.ndim != 4 or x.shape[1] != 1:
            raise DimensionError(f"expected input [N, T, F] or [N, 1, T, F], got {x.shape}", axis="rank")
        if x.shape[3] != self.spec.n_mels:
            raise DimensionError(
                f"input has {x.shape[3]} frequency bins, spec expects {self.spec.n_mels}", axis="F"
            )
        need = self.spec.min_input_extent
        if x.shape[2] < need or x.shape[3] < need:
            raise DimensionError(
                f"{self.spec.n_blocks} blocks need T and F >= {need}, got {x.shape[2:]}",
                axis="T" if x.shape[2] < need else "F",
            )
        return x

    def _head(self, pooled: Tensor, train: bool) -> Tensor:
        rate = self.spec.dropout
        h = ops.dropout(pooled, rate, self.dropout_rng, train)
        h = ops.relu(ops.linear(h, self.fc1_w, self.fc1_b))
        h = ops.dropout(h, rate, self.dropout_rng, train)
        return ops.linear(h, self.head_w, self.head_b)

    def __call__(self, x, emb=None, train: bool = False) -> Tensor:
        return self.forward(x, emb, train)

    def forward(self, x, emb=None, train: bool = False) -> Tensor:
        fusion = self.spec.fusion
        if fusion == "none":
            return forward_cnn14(self, x, train)
        if emb is None:
            raise ValueError(f"{fusion} fusion needs linguistic embeddings")
        if fusion == "single_stage":
            return forward_sfcnn14(self, x, emb, train)
        return forward_mfcnn14(self, x, emb, train)


def _check_emb(model: Model, emb, n: int) -> Tensor:
    emb = as_tensor(emb)
    if emb.ndim != 2 or emb.shape[1] != model.spec.embedding_dim:
        raise DimensionError(
            f"embeddings must be [N, {model.spec.embedding_dim}], got {emb.shape}", axis="L_dim"
        )
    if emb.shape[0] != n:
        raise DimensionError(f"{emb.shape[0]} embeddings for {n} inputs", axis="N")
    if emb.dtype != model.fc1_w.dtype:
        emb = Tensor(emb.data.astype(model.fc1_w.dtype)) if not emb.requires_grad else emb
    return emb


def _backbone(model: Model, x, train: bool) -> Tensor:
    h = model._prepare_input(x)
    for block in model.blocks:
        h = conv_block(h, block, train)
    return h


def forward_cnn14(model: Model, x, train: bool = False) -> Tensor:
    if model.spec.fusion != "none":
        raise ValueError(f"forward_cnn14 needs fusion 'none', spec has {model.spec.fusion!r}")
    return model._head(ops.global_pool(_backbone(model, x, train)), train)


def forward_sfcnn14(model: Model, x, emb, train: bool = False) -> Tensor:
    if model.spec.fusion != "single_stage":
        raise ValueError(f"forward_sfcnn14 needs fusion 'single_stage', spec has {model.spec.fusion!r}")
    pooled = ops.global_pool(_backbone(model, x, train))
    emb = _check_emb(model, emb, pooled.shape[0])
    fused = pooled + ops.linear(emb, model.fusion_w, model.fusion_b)
    return model._head(fused, train)


def forward_mfcnn14(model: Model, x, emb, train: bool = False) -> Tensor:
    if model.spec.fusion != "multistage":
        raise ValueError(f"forward_mfcnn14 needs fusion 'multistage', spec has {model.spec.fusion!r}")
    h = model._prepare_input(x)
    emb = _check_emb(model, emb, h.shape[0])
    for block in model.blocks:
        h = conditioned_conv_block(h, block, emb, train)
    return model._head(ops.global_pool(h), train)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def late_fuse(pred_a, pred_b, task: str) -> np.ndarray:
    """Average two unimodal predictions.

    Classification inputs are logits and are averaged as softmax
    probabilities; regression predictions are averaged directly.
    """
    a = np.asarray(pred_a, dtype=np.float64)
    b = np.asarray(pred_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"prediction shapes differ: {a.shape} vs {b.shape}")
    if task == "classification":
        return 0.5 * (softmax(a) + softmax(b))
    if task == "regression":
        return 0.5 * (a + b)
    raise ValueError(f"task must be 'classification' or 'regression', got {task!r}")


def count_parameters(spec: ModelSpec) -> int:
    """Closed-form parameter count (weights, biases, BN affine terms)."""
    total, c_in = 0, 1
    for c in spec.backbone_channels:
        total += c * c_in * 9 + c + 2 * c  # conv1 + bias, bn1
        total += c * c * 9 + c + 2 * c  # conv2 + bias, bn2
        if spec.fusion == "multistage":
            total += c * spec.embedding_dim + c
        c_in = c
    if spec.fusion == "single_stage":
        total += spec.pooled_dim * spec.embedding_dim + spec.pooled_dim
    total += spec.hidden * spec.pooled_dim + spec.hidden
    total += spec.n_outputs * spec.hidden + spec.n_outputs
    return total


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: Model, meta: Optional[dict] = None) -> None:
    header = {"model_spec": model.spec.to_dict(), "bn_tracked": model.bn_tracked(), "meta": meta or {}}
    write_framed(path, header, model.state_dict())


def load_checkpoint(path) -> tuple[Model, dict]:
    header, tensors = read_framed(path)
    spec = ModelSpec.from_dict(header["model_spec"])
    model = Model(spec, seed=0)
    model.load_state_dict(tensors, header.get("bn_tracked"))
    return model, header.get("meta", {})
