"""Embedding alignment losses between projected student and teacher embeddings.

Every loss returns the batch-mean value and its exact gradient with respect
to the student side. Teacher embeddings are constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import NumericalError, UsageError

NORM_EPS = 1e-12


class LossKind(str, Enum):
    MSE = "mse"
    L1 = "l1"
    COSINE = "cosine"
    CLAP = "clap"
    KL = "kl"


DEFAULT_LOSS = LossKind.COSINE


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray


def _check(Zs, Zt):
    Zs = np.asarray(Zs, dtype=np.float64)
    Zt = np.asarray(Zt, dtype=np.float64)
    if Zs.ndim != 2 or Zs.shape != Zt.shape:
        raise UsageError(f"shape mismatch: student {Zs.shape}, teacher {Zt.shape}")
    if Zs.shape[0] == 0:
        raise UsageError("empty batch")
    if not (np.all(np.isfinite(Zs)) and np.all(np.isfinite(Zt))):
        raise NumericalError("non-finite embedding entering the loss")
    return Zs, Zt


def softmax(Z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(Z - Z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(Z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = Z - Z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def loss_mse(Zs, Zt) -> LossOutput:
    Zs, Zt = _check(Zs, Zt)
    n = Zs.shape[0]
    diff = Zs - Zt
    return LossOutput(float(np.sum(diff * diff)) / n, (2.0 / n) * diff)


def loss_l1(Zs, Zt) -> LossOutput:
    Zs, Zt = _check(Zs, Zt)
    n = Zs.shape[0]
    diff = Zs - Zt
    return LossOutput(float(np.abs(diff).sum()) / n, np.sign(diff) / n)


def loss_cosine(Zs, Zt) -> LossOutput:
    Zs, Zt = _check(Zs, Zt)
    n = Zs.shape[0]
    ns = np.linalg.norm(Zs, axis=1)
    nt = np.linalg.norm(Zt, axis=1)
    for name, norms in (("student", ns), ("teacher", nt)):
        bad = np.flatnonzero(norms <= NORM_EPS)
        if bad.size:
            raise NumericalError(f"{name} row {int(bad[0])} has zero norm")
    dot = np.einsum("ij,ij->i", Zs, Zt)
    cos = dot / (ns * nt)
    # d cos / d a = b / (|a||b|) - cos * a / |a|^2
    dcos = Zt / (ns * nt)[:, None] - (cos / ns**2)[:, None] * Zs
    return LossOutput(float(np.sum(1.0 - cos)) / n, -dcos / n)


def loss_clap(Zs, Zt, temperature: float = 1.0, variant: str = "verbatim") -> LossOutput:
    """Bidirectional softmax matching over the batch similarity matrix.

    ``S = Zs @ Zt.T / temperature``. ``l1`` is the diagonal of the row-wise
    softmax of S, ``l2`` the diagonal of the row-wise softmax of S.T.

    variant="verbatim":      -(0.5/N) * sum(log(l1 + l2))
    variant="conventional":  -(0.5/N) * sum(log(l1) + log(l2))

    The verbatim form can go negative; since l1 + l2 <= 2 it is bounded
    below by -0.5 * log 2.
    """
    Zs, Zt = _check(Zs, Zt)
    if temperature <= 0:
        raise UsageError(f"temperature must be positive, got {temperature}")
    n = Zs.shape[0]
    S = (Zs @ Zt.T) / temperature
    idx = np.arange(n)
    eye = np.eye(n)
    if variant == "verbatim":
        A = softmax(S, axis=1)
        B = softmax(S.T, axis=1)
        l1, l2 = A[idx, idx], B[idx, idx]
        total = l1 + l2
        value = -0.5 / n * float(np.sum(np.log(total)))
        g = -0.5 / n / total
        # d l1_i / d S_ij = A_ii (delta_ij - A_ij); same for l2 on S.T
        G1 = (g * l1)[:, None] * (eye - A)
        G2 = (g * l2)[:, None] * (eye - B)
    elif variant == "conventional":
        LA = log_softmax(S, axis=1)
        LB = log_softmax(S.T, axis=1)
        value = -0.5 / n * float(np.sum(LA[idx, idx] + LB[idx, idx]))
        G1 = -0.5 / n * (eye - np.exp(LA))
        G2 = -0.5 / n * (eye - np.exp(LB))
    else:
        raise UsageError(f"unknown CLAP variant {variant!r}")
    dS = G1 + G2.T
    return LossOutput(value, (dS @ Zt) / temperature)


def loss_kl(Zs, Zt) -> LossOutput:
    """Mean over rows of KL(softmax(Zt) || softmax(Zs))."""
    Zs, Zt = _check(Zs, Zt)
    n = Zs.shape[0]
    log_pt = log_softmax(Zt)
    log_ps = log_softmax(Zs)
    pt = np.exp(log_pt)
    value = float(np.sum(pt * (log_pt - log_ps))) / n
    return LossOutput(value, (np.exp(log_ps) - pt) / n)


def loss_eval(
    kind: LossKind | str = DEFAULT_LOSS,
    Zs=None,
    Zt=None,
    *,
    clap_temperature: float = 1.0,
    clap_variant: str = "verbatim",
) -> LossOutput:
    try:
        kind = LossKind(kind)
    except ValueError:
        raise UsageError(f"unknown loss {kind!r}; choose from {[k.value for k in LossKind]}") from None
    if kind is LossKind.MSE:
        return loss_mse(Zs, Zt)
    if kind is LossKind.L1:
        return loss_l1(Zs, Zt)
    if kind is LossKind.COSINE:
        return loss_cosine(Zs, Zt)
    if kind is LossKind.CLAP:
        return loss_clap(Zs, Zt, clap_temperature, clap_variant)
    return loss_kl(Zs, Zt)
