"""Embedding-only knowledge distillation: train a small student to reproduce a
frozen teacher's output embeddings through a mapping head."""

from .bds import ClusterModel, SamplerWeights, assign, bds_weights, cluster_sweep, kmeans, sample_epoch
from .embed_store import EmbeddingSet, PairedDataset, align_pairs, read_embeddings, write_embeddings
from .evaluation import (
    EvalReport,
    LabeledSplit,
    ProbeConfig,
    ProbeTask,
    accuracy,
    knn_classify,
    linear_probe,
    mean_average_precision,
    retention,
)
from .losses import LossKind, LossOutput, loss_eval
from .nn import AdamState, DenseLayer, LrSchedule, Mlp, adam_step, backward, forward, lr_at
from .trainer import (
    TrainConfig,
    TrainReport,
    TrainState,
    distill,
    export_student_embeddings,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"
