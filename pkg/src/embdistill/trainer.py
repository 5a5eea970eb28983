"""Distillation loop: student MLP -> mapping head -> alignment loss vs. teacher embeddings."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import bds
from .embed_store import EmbeddingSet, PairedDataset, read_tensor, write_tensor
from .errors import CheckpointError, DataError, NumericalError, UsageError
from .losses import LossKind, loss_eval
from .nn import AdamState, DenseLayer, LrSchedule, Mlp, adam_step, backward, forward, lr_at

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "embdistill-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    base_lr: float = 8e-4
    epoch_sample_size: int = 100_000
    k_clusters: int = 50
    loss_kind: str = "cosine"
    bds_enabled: bool = True
    seed: int = 0
    student_hidden: list[int] = field(default_factory=lambda: [256])
    student_dim: int = 128
    head_hidden: int = 1280
    activation: str = "relu"
    head_activation: Optional[str] = None  # None: same as the student
    init: str = "kaiming-uniform"
    lr_shape: str = "warmup-cosine"
    warmup_frac: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bds_offset: float = 100.0
    cluster_normalize: bool = False
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    clap_variant: str = "verbatim"
    clap_temperature: float = 1.0
    norm_eps: float = 1e-12
    log_mel_floor: float = 1e-5

    def __post_init__(self):
        self.student_hidden = [int(h) for h in self.student_hidden]
        self.validate()

    def validate(self) -> None:
        positive = (
            "epoch_sample_size", "batch_size", "base_lr", "k_clusters", "student_dim",
            "head_hidden", "adam_eps", "clap_temperature", "kmeans_max_iter",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.epochs < 0:
            raise UsageError(f"epochs must be >= 0, got {self.epochs}")
        if any(h <= 0 for h in self.student_hidden):
            raise UsageError(f"student_hidden sizes must be positive, got {self.student_hidden}")
        try:
            LossKind(self.loss_kind)
        except ValueError:
            raise UsageError(f"unknown loss_kind {self.loss_kind!r}") from None
        if self.init != "kaiming-uniform":
            raise UsageError(f"unsupported init {self.init!r}")
        if self.clap_variant not in ("verbatim", "conventional"):
            raise UsageError(f"unknown clap_variant {self.clap_variant!r}")
        if self.bds_offset < 0:
            raise UsageError("bds_offset must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown training config keys: {unknown}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    student: Mlp
    head: Mlp
    adam: AdamState
    epoch: int = 0  # epochs completed
    step: int = 0  # optimizer steps taken


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    wall_time: float = 0.0
    checkpoint_path: Optional[str] = None
    config_hash: str = ""
    state: Optional[TrainState] = None


def init_state(config: TrainConfig, in_dim: int, teacher_dim: int) -> TrainState:
    rng = np.random.default_rng([config.seed, 0])
    student = Mlp.init([in_dim, *config.student_hidden, config.student_dim], rng, config.activation)
    head = Mlp.init(
        [config.student_dim, config.head_hidden, teacher_dim],
        rng,
        config.head_activation or config.activation,
    )
    params = {**student.parameters("student."), **head.parameters("head.")}
    adam = AdamState.zeros_like(
        params, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps
    )
    return TrainState(student, head, adam)


def epoch_plan(n: int, config: TrainConfig) -> tuple[int, int]:
    """(samples per epoch, steps per epoch). The last partial batch is kept."""
    m = min(config.epoch_sample_size, n)
    return m, math.ceil(m / config.batch_size)


def sampling_weights(targets: np.ndarray, config: TrainConfig) -> bds.SamplerWeights:
    if not config.bds_enabled:
        return bds.uniform_weights(len(targets))
    model = bds.kmeans(
        targets,
        config.k_clusters,
        max_iter=config.kmeans_max_iter,
        tol=config.kmeans_tol,
        seed=config.seed,
        normalize=config.cluster_normalize,
    )
    return bds.bds_weights(model.assignments, config.bds_offset)


def epoch_indices(weights, m: int, config: TrainConfig, epoch: int) -> np.ndarray:
    # one RNG stream per (seed, epoch) so a resumed run draws the same samples
    return bds.sample_epoch(weights, m, seed=[config.seed, 1, epoch])


def distill(
    data: PairedDataset,
    config: TrainConfig,
    *,
    resume: Optional[TrainState] = None,
    until_epoch: Optional[int] = None,
    log_path=None,
) -> tuple[Mlp, Mlp, TrainReport]:
    """Train student and mapping head so that head(student(X)) aligns with the teacher.

    ``until_epoch`` stops early (the LR schedule still spans ``config.epochs``),
    and ``resume`` continues from a saved :class:`TrainState`. Running 0..e
    and then resuming to the end is bit-identical to one uninterrupted run.
    """
    t0 = time.perf_counter()
    n = len(data)
    if n == 0:
        raise DataError("empty training set")
    X = np.asarray(data.inputs, dtype=np.float64)
    Zt = np.asarray(data.targets, dtype=np.float64)
    state = resume or init_state(config, X.shape[1], Zt.shape[1])
    if state.student.dims[0] != X.shape[1]:
        raise DataError(f"student expects {state.student.dims[0]} inputs, data has {X.shape[1]}")
    if state.head.dims[-1] != Zt.shape[1]:
        raise DataError(f"head outputs {state.head.dims[-1]} dims, teacher has {Zt.shape[1]}")
    if state.student.dims[-1] != state.head.dims[0]:
        raise DataError("student output and head input dims differ")

    end = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
    report = TrainReport(config_hash=config.hash(), state=state)
    if state.epoch >= end:
        report.wall_time = time.perf_counter() - t0
        return state.student, state.head, report

    m, steps_per_epoch = epoch_plan(n, config)
    if config.epoch_sample_size > n:
        logger.warning("epoch_sample_size %d exceeds dataset size %d; using %d", config.epoch_sample_size, n, n)
    # step s uses schedule point s + 1, so neither the first nor the last update has lr 0
    schedule = LrSchedule(config.epochs * steps_per_epoch + 1, config.base_lr, config.warmup_frac, config.lr_shape)
    weights = sampling_weights(Zt, config)
    params = {**state.student.parameters("student."), **state.head.parameters("head.")}
    loss_kw = dict(clap_temperature=config.clap_temperature, clap_variant=config.clap_variant)

    log_fh = writer = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume else "w", newline="", encoding="utf-8")
        writer = csv.writer(log_fh, lineterminator="\n")
        if not resume:
            writer.writerow(["epoch", "step", "lr", "loss", "wall_ms"])
    try:
        for epoch in range(state.epoch, end):
            idx = epoch_indices(weights, m, config, epoch)
            total = 0.0
            for start in range(0, m, config.batch_size):
                batch = idx[start : start + config.batch_size]
                zs, cache_s = forward(state.student, X[batch])
                zp, cache_h = forward(state.head, zs)
                out = loss_eval(config.loss_kind, zp, Zt[batch], **loss_kw)
                if not math.isfinite(out.value):
                    raise NumericalError(f"non-finite loss at step {state.step} (epoch {epoch})")
                grads_h, dzs = backward(state.head, cache_h, out.grad, "head.")
                grads_s, _ = backward(state.student, cache_s, dzs, "student.")
                lr = lr_at(schedule, state.step + 1)
                adam_step(params, {**grads_s, **grads_h}, state.adam, lr)
                state.step += 1
                total += out.value * len(batch)
                if writer is not None:
                    writer.writerow(
                        [epoch, state.step, repr(lr), repr(out.value), round(1000 * (time.perf_counter() - t0), 3)]
                    )
            state.epoch = epoch + 1
            report.epoch_losses.append(total / m)
            logger.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, total / m)
    finally:
        if log_fh is not None:
            log_fh.close()
    report.final_loss = report.epoch_losses[-1]
    report.wall_time = time.perf_counter() - t0
    return state.student, state.head, report


def export_student_embeddings(
    student: Mlp, inputs: EmbeddingSet, head: Optional[Mlp] = None, batch_size: int = 1024
) -> EmbeddingSet:
    """Embed every input row with the student (and the head, if given)."""
    if inputs.dim != student.dims[0]:
        raise DataError(f"student expects {student.dims[0]} inputs, got {inputs.dim}")
    X = inputs.data.astype(np.float64)
    out_dim = (head or student).dims[-1]
    out = np.empty((len(inputs), out_dim))
    for s in range(0, len(inputs), batch_size):
        z = student(X[s : s + batch_size])
        out[s : s + batch_size] = head(z) if head is not None else z
    return EmbeddingSet(inputs.ids, out, out_dim)


# -- checkpoints -------------------------------------------------------------

def _tensor_file(name: str) -> str:
    return name.replace("/", "_") + ".ssnd"


def save_checkpoint(path, state: TrainState, config: TrainConfig) -> Path:
    """Write ``path/manifest.json`` plus one SSND float64 file per tensor."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    params = {**state.student.parameters("student."), **state.head.parameters("head.")}
    tensors = []
    for group, arrays in (("param", params), ("adam_m", state.adam.m), ("adam_v", state.adam.v)):
        for name, arr in arrays.items():
            fname = f"tensors/{group}.{_tensor_file(name)}"
            write_tensor(path / fname, arr)
            tensors.append({"group": group, "name": name, "file": fname, "shape": list(arr.shape)})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "step": state.step,
        "student": {"dims": state.student.dims, "activation": state.student.activation},
        "head": {"dims": state.head.dims, "activation": state.head.activation},
        "adam": {
            "t": state.adam.t,
            "beta1": state.adam.beta1,
            "beta2": state.adam.beta2,
            "eps": state.adam.eps,
        },
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "tensors": tensors,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _empty_mlp(spec: dict) -> Mlp:
    dims = spec["dims"]
    layers = [DenseLayer(np.zeros((o, i)), np.zeros(o)) for i, o in zip(dims[:-1], dims[1:])]
    return Mlp(layers, spec["activation"])


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({exc})") from exc
    try:
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a checkpoint (format {manifest.get('format')!r})")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
        config = TrainConfig.from_dict(manifest["config"])
        student = _empty_mlp(manifest["student"])
        head = _empty_mlp(manifest["head"])
        params = {**student.parameters("student."), **head.parameters("head.")}
        a = manifest["adam"]
        adam = AdamState.zeros_like(params, beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
        adam.t = int(a["t"])
        groups = {"param": params, "adam_m": adam.m, "adam_v": adam.v}
        seen = set()
        for entry in manifest["tensors"]:
            target = groups[entry["group"]].get(entry["name"])
            if target is None:
                raise CheckpointError(f"{path}: unexpected tensor {entry['name']!r}")
            arr = read_tensor(path / entry["file"])
            if list(target.shape) != entry["shape"] or arr.size != target.size:
                raise CheckpointError(
                    f"{path}: tensor {entry['name']} has shape {entry['shape']}, expected {list(target.shape)}"
                )
            target[...] = arr.reshape(target.shape)
            seen.add((entry["group"], entry["name"]))
        missing = [(g, n) for g, arrs in groups.items() for n in arrs if (g, n) not in seen]
        if missing:
            raise CheckpointError(f"{path}: missing tensors {missing[:4]}")
        state = TrainState(student, head, adam, int(manifest["epoch"]), int(manifest["step"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupted manifest ({type(exc).__name__}: {exc})") from exc
    return state, config
