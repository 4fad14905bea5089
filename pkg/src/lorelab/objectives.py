"""Distances, margins and training losses.

Every loss reduces over the batch with the arithmetic mean. Per-sample
quantities are returned as tensors so the caller can differentiate them;
reference quantities (``z0``, ``p0``) are always treated as constants.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import PrototypeHead, prototype_log_probs
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarginMode:
    """``fixed is None`` selects the adaptive margin ``||z0||^2``."""

    fixed: float | None = None

    def __post_init__(self):
        if self.fixed is not None and not self.fixed > 0:
            raise ValueError("fixed margin must be positive")

    @property
    def adaptive(self) -> bool:
        return self.fixed is None

    @classmethod
    def parse(cls, text: str) -> "MarginMode":
        if text == "adaptive":
            return cls()
        if text.startswith("fixed:"):
            return cls(float(text.split(":", 1)[1]))
        raise ValueError(f"unknown margin mode {text!r}")

    def __str__(self):
        return "adaptive" if self.adaptive else f"fixed:{self.fixed:g}"


ADAPTIVE = MarginMode()


def _const(z) -> np.ndarray:
    return np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float32)


def sq_l2_dist(z1, z2) -> Tensor:
    """Per-sample squared euclidean distance between two embedding batches."""
    z1, z2 = T.as_tensor(z1), T.as_tensor(z2)
    if z1.shape != z2.shape:
        raise T.ShapeError(f"sq_l2_dist: shapes {z1.shape} and {z2.shape} differ")
    return T.sq_norm(z1 - z2)


def margin(z0, mode: MarginMode, rho: float) -> np.ndarray:
    """Per-sample tolerance ``rho * m(x)``; the fixed mode ignores ``rho``."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    z0 = _const(z0)
    if not mode.adaptive:
        return np.full(z0.shape[0], mode.fixed, dtype=np.float32)
    m = np.sum(np.square(z0, dtype=np.float64), axis=1)
    if np.any(m == 0):
        log.warning("zero reference embedding: constraint threshold is 0 for %d samples", int(np.sum(m == 0)))
    return (rho * m).astype(np.float32)


def degenerate_reference(z0) -> np.ndarray:
    """Mask of samples whose reference embedding has zero norm."""
    return np.sum(np.square(_const(z0), dtype=np.float64), axis=1) == 0


def fare_loss(z_adv, z0) -> Tensor:
    return T.mean(sq_l2_dist(z_adv, _const(z0)))


def naive_reg_loss(z_adv, z_clean, z0, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("regularisation weight must be non-negative")
    z0 = _const(z0)
    return fare_loss(z_adv, z0) + T.mean(sq_l2_dist(z_clean, z0)) * lam


def lore_clean_loss(z_clean, z0, rho: float, mode: MarginMode = ADAPTIVE) -> Tensor:
    """Per-sample constraint residual ``d(z, z0) - rho m(x)``; negative means slack."""
    z0 = _const(z0)
    return sq_l2_dist(z_clean, z0) - margin(z0, mode, rho)


@dataclass
class LossBreakdown:
    robust: float
    clean: float
    lambda_mean: float
    total: float
    per_sample_clean: np.ndarray
    per_sample_lambda: np.ndarray
    objective: Tensor | None = None

    def fields(self) -> dict:
        return {
            "loss_robust": self.robust,
            "loss_clean": self.clean,
            "mean_lambda": self.lambda_mean,
            "loss_total": self.total,
        }


def combine(robust: Tensor, clean: Tensor, lam) -> LossBreakdown:
    """Assemble ``mean_i[robust_i + lam_i * clean_i]``.

    ``robust`` may be per-sample or an already-reduced scalar; ``lam`` is
    detached from any tape.
    """
    lam = _const(lam)
    if np.any(lam < 0):
        raise ValueError("negative multiplier")
    if lam.shape != clean.shape:
        raise T.ShapeError(f"multiplier shape {lam.shape} != constraint shape {clean.shape}")
    weighted = clean * lam
    if robust.data.ndim == 0:
        total = robust + T.mean(weighted)
        robust_mean = float(robust.data)
    else:
        total = T.mean(robust + weighted)
        robust_mean = float(T.mean(T.Tensor(robust.data)).data)
    return LossBreakdown(
        robust=robust_mean,
        clean=float(np.mean(clean.data, dtype=np.float64)),
        lambda_mean=float(np.mean(lam, dtype=np.float64)),
        total=float(total.data),
        per_sample_clean=clean.data.copy(),
        per_sample_lambda=lam.copy(),
        objective=total,
    )


def lore_total(z_adv, z_clean, z0, lam, rho: float, mode: MarginMode = ADAPTIVE) -> LossBreakdown:
    z0 = _const(z0)
    robust = sq_l2_dist(z_adv, z0)
    clean = lore_clean_loss(z_clean, z0, rho, mode)
    return combine(robust, clean, lam)


def cosine(u, v) -> np.ndarray:
    """Row-wise cosine similarity in float64."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise ValueError("cosine similarity of a zero-norm vector")
    return np.sum(u * v, axis=-1) / (nu * nv)


def cosine_dev(u, u_hat, v) -> np.ndarray:
    return np.abs(cosine(u, v) - cosine(u_hat, v))


def cosine_dev_bound(rho: float) -> float:
    if rho < 0:
        raise ValueError("rho must be non-negative")
    return 2.0 * math.sqrt(rho)


def tecoa_loss(z_adv, head: PrototypeHead, labels) -> Tensor:
    """Mean cross-entropy of the prototype classifier."""
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= head.n_classes):
        raise ValueError("label out of range")
    return -T.mean(T.pick(prototype_log_probs(head, z_adv), labels))


def entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def kl_constraint_loss(p_theta, p0, rho: float) -> Tensor:
    """Per-sample ``KL(p0 || p_theta) - rho H(p0)``.

    ``p_theta`` is the differentiable probability tensor of the model being
    trained; ``p0`` is the constant reference distribution.
    """
    p_theta = T.as_tensor(p_theta)
    p0 = np.asarray(p0, dtype=np.float64)
    if p0.shape != p_theta.shape:
        raise T.ShapeError(f"kl: shapes {p0.shape} and {p_theta.shape} differ")
    dead = p_theta.data <= 0
    if np.any(dead & (p0 > 0)):
        raise ValueError("model assigns zero mass where the reference does not")
    # classes with p0 == 0 contribute nothing; keep log() finite there
    log_p = T.log(p_theta + dead.astype(np.float32))
    with np.errstate(divide="ignore"):
        log_p0 = np.log(np.where(p0 > 0, p0, 1.0))
    self_term = (p0 * log_p0).sum(axis=1)
    cross = T.sum_(log_p * p0.astype(np.float32), axis=1)
    return (self_term - rho * entropy(p0)).astype(np.float32) - cross
