"""Desk-scale stand-in for a teacher/student setup.

Inputs are 20-dim Gaussians around 10 class centres; the "teacher" is a
frozen random 2-layer MLP mapping them to 64-dim embeddings. Class ids
double as downstream labels for probing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed_store import EmbeddingSet, PairedDataset
from .evaluation import LabeledSplit, ProbeTask
from .nn import Mlp


@dataclass
class SyntheticData:
    ids: list[str]
    inputs: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    teacher: Mlp
    train_idx: np.ndarray
    test_idx: np.ndarray

    def paired(self, subset: str = "all") -> PairedDataset:
        rows = self._rows(subset)
        return PairedDataset(self.inputs[rows], self.targets[rows], [self.ids[i] for i in rows])

    def _rows(self, subset):
        if subset == "all":
            return np.arange(len(self.ids))
        return {"train": self.train_idx, "test": self.test_idx}[subset]

    def embedding_set(self, which: str) -> EmbeddingSet:
        data = {"inputs": self.inputs, "targets": self.targets}[which]
        return EmbeddingSet(self.ids, data)

    def probe_task(self, which: str = "inputs", name: str = "synth10") -> ProbeTask:
        """Probe task over inputs (to be passed through a student) or teacher targets."""
        data = {"inputs": self.inputs, "targets": self.targets}[which]
        return ProbeTask(
            name,
            LabeledSplit(data[self.train_idx], self.labels[self.train_idx], "train", self.n_classes),
            LabeledSplit(data[self.test_idx], self.labels[self.test_idx], "test", self.n_classes),
        )

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


def make_synthetic(
    n: int = 5000,
    in_dim: int = 20,
    teacher_dim: int = 64,
    teacher_hidden: int = 64,
    n_classes: int = 10,
    center_scale: float = 1.0,
    test_frac: float = 0.2,
    seed: int = 0,
) -> SyntheticData:
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(n_classes, in_dim))
    labels = rng.integers(n_classes, size=n)
    inputs = centers[labels] + rng.normal(size=(n, in_dim))
    teacher = Mlp.init([in_dim, teacher_hidden, teacher_dim], rng, "relu")
    targets = teacher(inputs)
    # float32 storage is the on-disk contract; keep in-memory copies identical
    inputs = inputs.astype(np.float32).astype(np.float64)
    targets = targets.astype(np.float32).astype(np.float64)
    perm = rng.permutation(n)
    n_test = int(round(test_frac * n))
    ids = [f"clip{i:05d}" for i in range(n)]
    return SyntheticData(
        ids, inputs, targets, labels, teacher, np.sort(perm[n_test:]), np.sort(perm[:n_test])
    )
