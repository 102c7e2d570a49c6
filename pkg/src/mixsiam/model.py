"""The siamese network: encoder f (conv backbone + 3-layer projection MLP)
and predictor h. One parameter set serves every branch; "branches" exist
only in the loss wiring, so weight sharing is by construction.

Batch-norm running statistics are updated on every train-mode forward,
which means each of the three branch passes in a training step advances
them (documented behavior for weight-shared siamese training).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ConvStage:
    channels: int
    stride: int = 1
    residual: bool = False  # identity skip; requires stride 1 and matching width

    def __post_init__(self):
        if self.channels < 1 or self.stride < 1:
            raise ConfigError(f"conv stage needs positive channels/stride, got {self}")
        if self.residual and self.stride != 1:
            raise ConfigError(f"residual stage must keep stride 1, got stride {self.stride}")


@dataclass(frozen=True)
class EncoderSpec:
    """Backbone stages (3x3 convs, BN, ReLU, stride-2 downsamples, global
    average pool) followed by a 3-layer projection MLP ending at embed_dim.
    The last projector layer carries batch-norm but no nonlinearity."""

    stages: tuple = (ConvStage(32), ConvStage(64, 2), ConvStage(128, 2), ConvStage(256, 2))
    projector: tuple = (256, 256, 256)
    embed_dim: int = 256
    in_channels: int = 3

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("encoder needs at least one conv stage")
        if len(self.projector) != 3:
            raise ConfigError(f"projector must list exactly 3 layer widths, got {self.projector}")
        if self.projector[-1] != self.embed_dim:
            raise ConfigError(
                f"projector must end at embed_dim ({self.embed_dim}), got {self.projector}")
        if any(w < 1 for w in self.projector) or self.embed_dim < 1:
            raise ConfigError(f"projector widths must be positive, got {self.projector}")
        prev = self.stages[0].channels
        for st in self.stages[1:]:
            if st.residual and st.channels != prev:
                raise ConfigError(
                    f"residual stage must keep width {prev}, got {st.channels}")
            prev = st.channels

    @classmethod
    def small(cls):
        """Desk preset sized so collapse diagnostics stay informative:
        mean per-dimension std of unit-norm embeddings is bounded by
        1/sqrt(embed_dim), so a >0.1 healthy regime needs embed_dim < 100."""
        return cls(stages=(ConvStage(16), ConvStage(32, 2), ConvStage(64, 2)),
                   projector=(32, 32, 32), embed_dim=32)

    @classmethod
    def tiny(cls):
        """Gradient-check scale: every finite-difference probe stays cheap."""
        return cls(stages=(ConvStage(4, 2), ConvStage(8, 2)),
                   projector=(8, 8, 8), embed_dim=8)


@dataclass(frozen=True)
class PredictorSpec:
    """Two linear layers embed -> hidden -> embed; batch-norm and ReLU on
    the hidden layer only, output layer bare (bias, no BN, no ReLU)."""

    hidden_dim: int = 64
    embed_dim: int = 256

    def __post_init__(self):
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise ConfigError(f"predictor dims must be positive, got {self}")

    @classmethod
    def small(cls):
        return cls(hidden_dim=8, embed_dim=32)

    @classmethod
    def tiny(cls):
        return cls(hidden_dim=2, embed_dim=8)


@dataclass
class ModelParams:
    tensors: dict           # name -> Tensor, ordered
    running: dict           # name -> np.ndarray batch-norm buffers
    no_decay: frozenset     # parameter names exempt from weight decay
    encoder: EncoderSpec
    predictor: PredictorSpec

    def named(self):
        return self.tensors.items()


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init(encoder: EncoderSpec, predictor: PredictorSpec, seed: int, dtype=np.float64) -> ModelParams:
    """Deterministic fan-in-uniform initialization.

    Weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases and batch-norm
    beta start at zero, gamma at one.
    """
    if predictor.embed_dim != encoder.embed_dim:
        raise ConfigError(
            f"predictor embed_dim {predictor.embed_dim} != encoder embed_dim {encoder.embed_dim}")
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    tensors = {}
    running = {}
    no_decay = set()

    def bn(prefix, width):
        tensors[f"{prefix}.bn.gamma"] = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        tensors[f"{prefix}.bn.beta"] = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        no_decay.update({f"{prefix}.bn.gamma", f"{prefix}.bn.beta"})
        running[f"{prefix}.bn.mean"] = np.zeros(width, dtype=dtype)
        running[f"{prefix}.bn.var"] = np.ones(width, dtype=dtype)

    cin = encoder.in_channels
    for i, stage in enumerate(encoder.stages):
        shape = (stage.channels, cin, 3, 3)
        tensors[f"backbone.{i}.conv.w"] = Tensor(
            _uniform(rng, shape, cin * 9, dtype), requires_grad=True)
        bn(f"backbone.{i}", stage.channels)
        cin = stage.channels

    width = cin
    for j, out in enumerate(encoder.projector):
        tensors[f"projector.{j}.w"] = Tensor(
            _uniform(rng, (width, out), width, dtype), requires_grad=True)
        bn(f"projector.{j}", out)
        width = out

    tensors["predictor.0.w"] = Tensor(
        _uniform(rng, (predictor.embed_dim, predictor.hidden_dim), predictor.embed_dim, dtype),
        requires_grad=True)
    bn("predictor.0", predictor.hidden_dim)
    tensors["predictor.1.w"] = Tensor(
        _uniform(rng, (predictor.hidden_dim, predictor.embed_dim), predictor.hidden_dim, dtype),
        requires_grad=True)
    tensors["predictor.1.b"] = Tensor(
        np.zeros(predictor.embed_dim, dtype=dtype), requires_grad=True)
    no_decay.add("predictor.1.b")

    return ModelParams(tensors=tensors, running=running, no_decay=frozenset(no_decay),
                       encoder=encoder, predictor=predictor)


def _bn(params, prefix, x, mode):
    return ad.batchnorm(x,
                        params.tensors[f"{prefix}.bn.gamma"],
                        params.tensors[f"{prefix}.bn.beta"],
                        params.running[f"{prefix}.bn.mean"],
                        params.running[f"{prefix}.bn.var"],
                        mode)


def encode(params: ModelParams, x, mode: str) -> Tensor:
    """z = f(x): backbone -> global average pool -> projector.

    `x` is a [B, C, H, W] array or Tensor; the output is NOT normalized
    (normalization belongs to the loss). Train mode requires batch >= 2.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    if x.data.ndim != 4:
        raise ShapeError(f"encode: expected [B, C, H, W], got shape {x.data.shape}")
    if mode == "train" and x.data.shape[0] < 2:
        raise ShapeError(
            f"encode: train mode needs batch size >= 2, got {x.data.shape[0]}")
    h = x
    for i, stage in enumerate(params.encoder.stages):
        inp = h
        h = ad.conv2d(h, params.tensors[f"backbone.{i}.conv.w"], stride=stage.stride, padding=1)
        h = _bn(params, f"backbone.{i}", h, mode)
        if stage.residual:
            h = h + inp
        h = h.relu()
    h = ad.global_avg_pool(h)
    for j in range(3):
        h = ad.matmul(h, params.tensors[f"projector.{j}.w"])
        h = _bn(params, f"projector.{j}", h, mode)
        if j < 2:
            h = h.relu()
    return h


def predict(params: ModelParams, z: Tensor, mode: str) -> Tensor:
    """p = h(z): embed -> hidden (BN+ReLU) -> embed (bias only)."""
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z))
    if mode == "train" and z.data.shape[0] < 2:
        raise ShapeError(
            f"predict: train mode needs batch size >= 2, got {z.data.shape[0]}")
    h = ad.matmul(z, params.tensors["predictor.0.w"])
    h = _bn(params, "predictor.0", h, mode)
    h = h.relu()
    h = ad.matmul(h, params.tensors["predictor.1.w"])
    return ad.add_bias(h, params.tensors["predictor.1.b"])
