"""End-to-end training: triplet construction, three weight-shared forward
branches, blended loss, SGD-with-momentum under a cosine schedule,
per-epoch checkpoints, and a per-step metrics CSV.

Everything is deterministic from (config, seed): augmentation randomness is
keyed per (seed, epoch, sample, slot), epoch shuffles per (seed, epoch),
and no other entropy source exists, so a resumed run replays the exact
step sequence of an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, LambdaMixPolicy, make_triplet
from .data import Dataset, SyntheticConfig, batches, load_cifar10, make_synthetic, stack_pixels
from .errors import ConfigError, ParseError, TrainingAborted
from .loss import AggregationStrategy, aggregate, mix_loss, neg_cosine, siam_loss, total_loss
from .model import ConvStage, EncoderSpec, ModelParams, PredictorSpec, encode, init, predict

CHECKPOINT_MAGIC = b"MXSM"
CHECKPOINT_VERSION = 1
LOSS_TAIL_LEN = 50
METRICS_COLUMNS = ("step", "epoch", "lr", "l_siam", "l_mix", "total",
                   "grad_norm", "embedding_std")
AGG_SLOT = 3  # rng slot for the seeded_random aggregation coin (views use 0..2)


@dataclass(frozen=True)
class DatasetConfig:
    """What to train on. kind "synthetic" generates gratings in-process;
    "cifar10" reads binary batches from `dir`."""

    kind: str = "synthetic"
    classes: int = 3
    per_class: int = 100
    size: int = 32
    seed: int = 0
    dir: str = ""
    split: str = "train"

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"dataset kind must be synthetic|cifar10, got {self.kind!r}")

    def build(self) -> Dataset:
        if self.kind == "synthetic":
            return make_synthetic(SyntheticConfig(
                classes=self.classes, per_class=self.per_class,
                size=self.size, seed=self.seed))
        if not self.dir:
            raise ConfigError("dataset kind cifar10 requires a data dir")
        return load_cifar10(self.dir, split=self.split)


@dataclass(frozen=True)
class TrainConfig:
    dataset: DatasetConfig = DatasetConfig()
    encoder: EncoderSpec = EncoderSpec.small()
    predictor: PredictorSpec = PredictorSpec.small()
    augment: AugmentConfig = AugmentConfig()
    lam: float = 0.5                       # serialized as "lambda"
    lambda_mix: LambdaMixPolicy = LambdaMixPolicy()
    aggregation: AggregationStrategy = AggregationStrategy()
    lr_base: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    precision: int = 32
    strict_deterministic: bool = True
    stop_gradient: bool = True             # False is the collapse ablation

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0,1], got {self.lam}")
        if self.lr_base <= 0:
            raise ConfigError(f"lr_base must be > 0, got {self.lr_base}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.encoder.embed_dim != self.predictor.embed_dim:
            raise ConfigError(
                f"encoder embed_dim {self.encoder.embed_dim} != predictor"
                f" embed_dim {self.predictor.embed_dim}")

    @property
    def dtype(self):
        return ad.DTYPES[self.precision]


# -- config (de)serialization -------------------------------------------


def config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "dataset": vars(cfg.dataset).copy(),
        "encoder": {
            "stages": [vars(s).copy() for s in cfg.encoder.stages],
            "projector": list(cfg.encoder.projector),
            "embed_dim": cfg.encoder.embed_dim,
            "in_channels": cfg.encoder.in_channels,
        },
        "predictor": vars(cfg.predictor).copy(),
        "augment": {k: list(v) if isinstance(v, tuple) else v
                    for k, v in vars(cfg.augment).items()},
        "lambda": cfg.lam,
        "lambda_mix": vars(cfg.lambda_mix).copy(),
        "aggregation": vars(cfg.aggregation).copy(),
        "lr_base": cfg.lr_base,
        "momentum": cfg.momentum,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "precision": cfg.precision,
        "strict_deterministic": cfg.strict_deterministic,
        "stop_gradient": cfg.stop_gradient,
    }


def _build(cls, payload, context, tuples=()):
    if not isinstance(payload, dict):
        raise ConfigError(f"{context}: expected an object, got {type(payload).__name__}")
    import dataclasses
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"{context}: unknown field(s) {sorted(unknown)}")
    kwargs = {k: tuple(v) if k in tuples and isinstance(v, list) else v
              for k, v in payload.items()}
    return cls(**kwargs)


def config_from_dict(payload: dict) -> TrainConfig:
    if not isinstance(payload, dict):
        raise ConfigError(f"config: expected a JSON object, got {type(payload).__name__}")
    payload = dict(payload)
    known = {"dataset", "encoder", "predictor", "augment", "lambda", "lambda_mix",
             "aggregation", "lr_base", "momentum", "weight_decay", "batch_size",
             "epochs", "seed", "precision", "strict_deterministic", "stop_gradient"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"config: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    if "dataset" in payload:
        kwargs["dataset"] = _build(DatasetConfig, payload["dataset"], "dataset")
    if "encoder" in payload:
        enc = dict(payload["encoder"])
        if "stages" in enc:
            enc["stages"] = tuple(_build(ConvStage, s, "encoder.stages") for s in enc["stages"])
        if "projector" in enc:
            enc["projector"] = tuple(enc["projector"])
        kwargs["encoder"] = _build(EncoderSpec, enc, "encoder")
    if "predictor" in payload:
        kwargs["predictor"] = _build(PredictorSpec, payload["predictor"], "predictor")
    if "augment" in payload:
        kwargs["augment"] = _build(
            AugmentConfig, payload["augment"], "augment",
            tuples=("crop_scale_range", "jitter_strengths", "blur_sigma_range",
                    "aspect_ratio_range"))
    if "lambda" in payload:
        kwargs["lam"] = payload["lambda"]
    if "lambda_mix" in payload:
        kwargs["lambda_mix"] = _build(LambdaMixPolicy, payload["lambda_mix"], "lambda_mix")
    if "aggregation" in payload:
        kwargs["aggregation"] = _build(AggregationStrategy, payload["aggregation"], "aggregation")
    for key in ("lr_base", "momentum", "weight_decay", "batch_size", "epochs",
                "seed", "precision", "strict_deterministic", "stop_gradient"):
        if key in payload:
            kwargs[key] = payload[key]
    try:
        return TrainConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"config: {e}") from None


def config_hash(cfg: TrainConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# -- schedule and diagnostics --------------------------------------------


def cosine_lr(step: int, total_steps: int, lr_base: float) -> float:
    """lr_base * 0.5 * (1 + cos(pi * step / total_steps))."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return float(lr_base * 0.5 * (1.0 + np.cos(np.pi * step / total_steps)))


def embedding_std(z: np.ndarray) -> float:
    """Collapse sentinel: mean per-dimension std of L2-normalized rows.

    A constant representation drives this to 0; a healthy, spread-out one
    keeps it near the isotropic ceiling 1/sqrt(dim).
    """
    z = np.asarray(z, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), ad.L2_NORM_EPS)
    return float((z / norms).std(axis=0).mean())


@dataclass(frozen=True)
class StepMetrics:
    step: int
    epoch: int
    lr: float
    l_siam: float
    l_mix: float
    total: float
    grad_norm: float
    embedding_std: float

    def row(self):
        return (f"{self.step},{self.epoch},{self.lr!r},{self.l_siam!r},"
                f"{self.l_mix!r},{self.total!r},{self.grad_norm!r},"
                f"{self.embedding_std!r}")


@dataclass
class TrainState:
    params: ModelParams
    velocity: dict          # name -> momentum buffer, same shapes as params
    step: int = 0
    epoch: int = 0
    loss_tail: list = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig):
        params = init(cfg.encoder, cfg.predictor, seed=cfg.seed, dtype=cfg.dtype)
        velocity = {name: np.zeros_like(t.data) for name, t in params.named()}
        return cls(params=params, velocity=velocity)


def _check_finite(name, arr, step):
    if not np.all(np.isfinite(arr)):
        raise TrainingAborted(f"non-finite values in {name} at step {step}")


def apply_sgd(params: ModelParams, velocity: dict, lr: float, momentum: float,
              weight_decay: float, step: int = 0) -> float:
    """SGD with momentum, consuming .grad on every parameter tensor.

    For each parameter:  buf = momentum*buf + (grad + wd*param);
    param -= lr*buf.  Weight decay is skipped for names in params.no_decay
    (batchnorm scales/shifts and biases).  Mutates data and velocity in
    place, clears grads, and returns the squared global gradient norm
    (pre-decay, accumulated in float64).  A missing grad counts as zero;
    a non-finite grad raises TrainingAborted.
    """
    dtype = None
    sq_norm = 0.0
    for name, t in params.named():
        if dtype is None:
            dtype = t.data.dtype.type
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        _check_finite(f"gradient of {name}", g, step)
        sq_norm += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
        if weight_decay and name not in params.no_decay:
            g = g + dtype(weight_decay) * t.data
        buf = velocity[name]
        buf *= dtype(momentum)
        buf += g
        t.data -= dtype(lr) * buf
        t.grad = None
    return sq_norm


def train_step(state: TrainState, batch, cfg: TrainConfig, total_steps: int) -> StepMetrics:
    """One optimizer step on one batch of records.

    Three forward branches share the one parameter set; branch gradients
    accumulate on the shared tensors before the single SGD update. Weight
    decay is the classic gradient addition wd*param, skipped for
    batch-norm gamma/beta and biases.
    """
    params = state.params
    triplets = [make_triplet(r, cfg.augment, cfg.lambda_mix, state.epoch) for r in batch]
    dtype = cfg.dtype
    x1 = np.stack([t.x1 for t in triplets]).astype(dtype)
    x2 = np.stack([t.x2 for t in triplets]).astype(dtype)
    xm = np.stack([t.xm for t in triplets]).astype(dtype)

    z1 = encode(params, x1, "train")
    z2 = encode(params, x2, "train")
    p1 = predict(params, z1, "train")
    p2 = predict(params, z2, "train")
    zm = encode(params, xm, "train")
    pm = predict(params, zm, "train")

    agg_rng = np.random.default_rng([cfg.seed, state.epoch, state.step, AGG_SLOT])
    if cfg.stop_gradient:
        l_siam = siam_loss(p1, p2, z1, z2)
        z_f = aggregate(z1, z2, cfg.aggregation, agg_rng).detach()
        l_mix = mix_loss(pm, z_f)
    else:
        # collapse ablation: targets stay attached to the graph
        l_siam = siam_loss(p1, p2, z1, z2, stop_gradient=False)
        l_mix = neg_cosine(pm, aggregate(z1, z2, cfg.aggregation, agg_rng))
    total, breakdown = total_loss(l_siam, l_mix, cfg.lam)

    _check_finite("loss", total.data, state.step)
    ad.backward(total)

    lr = cosine_lr(state.step, total_steps, cfg.lr_base)
    sq_norm = apply_sgd(params, state.velocity, lr, cfg.momentum,
                        cfg.weight_decay, step=state.step)

    metrics = StepMetrics(
        step=state.step, epoch=state.epoch, lr=lr,
        l_siam=breakdown.l_siam, l_mix=breakdown.l_mix, total=breakdown.total,
        grad_norm=float(np.sqrt(sq_norm)),
        embedding_std=embedding_std(z1.data),
    )
    state.loss_tail.append(breakdown.total)
    del state.loss_tail[:-LOSS_TAIL_LEN]
    state.step += 1
    return metrics


# -- checkpoints ----------------------------------------------------------


def _array_manifest(state: TrainState):
    """(kind, name, array) triples in a fixed serialization order."""
    out = []
    for name, t in state.params.named():
        out.append(("param", name, t.data))
    for name, t in state.params.named():
        out.append(("velocity", name, state.velocity[name]))
    for name, arr in state.params.running.items():
        out.append(("running", name, arr))
    return out


def save_checkpoint(state: TrainState, cfg: TrainConfig, path):
    """Binary checkpoint: MXSM magic, u32 version, u64 header length, JSON
    header, then the little-endian float payload (params, momentum buffers
    and batch-norm running stats — everything bitwise resume needs)."""
    dtype = np.dtype("<f4" if cfg.precision == 32 else "<f8")
    arrays = []
    offset = 0
    blobs = []
    for kind, name, arr in _array_manifest(state):
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        arrays.append({"kind": kind, "name": name, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "epoch": state.epoch,
        "step": state.step,
        "dtype": dtype.str,
        "rng": {"scheme": "keyed", "note": "streams derive from (seed, epoch, "
                "sample, slot); no mutable rng state exists"},
        "loss_tail": state.loss_tail[-LOSS_TAIL_LEN:],
        "arrays": arrays,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def _read_header(f, path):
    magic = f.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic {magic!r} at byte offset 0")
    (version,) = struct.unpack("<I", f.read(4))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", f.read(8))
    return json.loads(f.read(hlen).decode())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def load_checkpoint(path) -> tuple:
    """Rebuild (TrainState, TrainConfig) from a checkpoint file."""
    with open(path, "rb") as f:
        header = _read_header(f, path)
        payload = f.read()
    cfg = config_from_dict(header["config"])
    state = TrainState.fresh(cfg)
    state.epoch = header["epoch"]
    state.step = header["step"]
    state.loss_tail = list(header["loss_tail"])
    dtype = np.dtype(header["dtype"])
    lookup = {"param": {n: t.data for n, t in state.params.named()},
              "velocity": state.velocity,
              "running": state.params.running}
    for entry in header["arrays"]:
        dest = lookup[entry["kind"]][entry["name"]]
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise ParseError(
                f"{path}: truncated payload, array {entry['name']} needs"
                f" bytes up to {end} but only {len(payload)} are present")
        raw = payload[entry["offset"]:end]
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        if dest.shape != arr.shape:
            raise ParseError(
                f"{path}: array {entry['name']} has shape {arr.shape},"
                f" expected {dest.shape}")
        dest[...] = arr.astype(dest.dtype)
    return state, cfg


# -- the outer loop ---------------------------------------------------------


def metrics_path(out_dir):
    return os.path.join(out_dir, "metrics.csv")


def checkpoint_path(out_dir, epoch):
    return os.path.join(out_dir, f"ckpt_epoch_{epoch}.bin")


def run(cfg: TrainConfig, dataset: Dataset, out_dir, resume=None,
        allow_config_mismatch=False, on_metrics=None):
    """Train for cfg.epochs over `dataset`, writing per-epoch checkpoints
    and appending one metrics row per step.

    `resume` names a checkpoint written by a run with the same config
    hash (override with allow_config_mismatch). Resumption happens at an
    epoch boundary and replays the remaining epochs exactly as the
    uninterrupted run would have.
    """
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise ConfigError(f"output dir {out_dir} is not writable")
    steps_per_epoch = len(dataset) // cfg.batch_size
    if steps_per_epoch < 1:
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    total_steps = steps_per_epoch * cfg.epochs

    mpath = metrics_path(out_dir)
    if resume is not None:
        state, ckpt_cfg = load_checkpoint(resume)
        if config_hash(ckpt_cfg) != config_hash(cfg) and not allow_config_mismatch:
            raise ConfigError(
                f"resume config hash {config_hash(ckpt_cfg)} does not match"
                f" current {config_hash(cfg)} (pass the override to force)")
        mode = "a" if os.path.exists(mpath) else "w"
    else:
        state = TrainState.fresh(cfg)
        mode = "w"

    with open(mpath, mode) as mfile:
        if mode == "w":
            mfile.write(f"# config_hash={config_hash(cfg)}\n")
            mfile.write(",".join(METRICS_COLUMNS) + "\n")
        for epoch in range(state.epoch, cfg.epochs):
            state.epoch = epoch
            for batch in batches(dataset, cfg.batch_size, cfg.seed, epoch):
                metrics = train_step(state, batch, cfg, total_steps)
                mfile.write(metrics.row() + "\n")
                if on_metrics is not None:
                    on_metrics(metrics)
            state.epoch = epoch + 1
            save_checkpoint(state, cfg, checkpoint_path(out_dir, epoch + 1))
    save_checkpoint(state, cfg, os.path.join(out_dir, "ckpt_final.bin"))
    return state
