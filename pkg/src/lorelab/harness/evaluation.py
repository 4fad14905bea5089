"""Accuracy under clean, adversarial and noisy inputs; constraint tracking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import objectives as O
from ..attacks import AttackConfig, gaussian_corrupt, pgd_classification
from ..models import PrototypeHead, encode, predict
from .data import Dataset

EVAL_BATCH = 1024


def _require_labels(dataset: Dataset):
    if dataset.labels is None:
        raise ValueError("evaluation needs labels")
    if len(dataset) == 0:
        raise ValueError("empty evaluation split")


def _accuracy(theta, head, inputs, labels) -> float:
    hits = 0
    for s in range(0, len(inputs), EVAL_BATCH):
        z = encode(theta, inputs[s:s + EVAL_BATCH]).data
        hits += int(np.sum(predict(head, z) == labels[s:s + EVAL_BATCH]))
    return hits / len(inputs)


def eval_clean(theta, head: PrototypeHead, dataset: Dataset) -> float:
    _require_labels(dataset)
    return _accuracy(theta, head, dataset.inputs, dataset.labels)


def adversarial_inputs(theta, head, dataset: Dataset, cfg: AttackConfig, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = np.empty_like(dataset.inputs)
    for s in range(0, len(dataset), EVAL_BATCH):
        x = dataset.inputs[s:s + EVAL_BATCH]
        y = dataset.labels[s:s + EVAL_BATCH]
        out[s:s + EVAL_BATCH] = x + pgd_classification(x, y, theta, head, cfg, rng=rng)
    return out


def eval_robust(theta, head: PrototypeHead, dataset: Dataset, cfg: AttackConfig, seed=0) -> float:
    _require_labels(dataset)
    if cfg.epsilon == 0 or cfg.steps == 0 and cfg.init == "zero":
        return eval_clean(theta, head, dataset)
    return _accuracy(theta, head, adversarial_inputs(theta, head, dataset, cfg, seed), dataset.labels)


@dataclass
class ConstraintReport:
    distances: np.ndarray
    thresholds: np.ndarray
    constraint_frac: float
    mean_distance: float
    bin_edges: np.ndarray
    counts: np.ndarray

    def fields(self) -> dict:
        return {"constraint_frac": self.constraint_frac, "mean_clean_dist": self.mean_distance}


N_BINS = 64


def constraint_report(theta, theta0, dataset: Dataset, rho: float, mode: O.MarginMode = O.ADAPTIVE) -> ConstraintReport:
    x = dataset.inputs
    z0 = encode(theta0, x).data
    dist = O.sq_l2_dist(encode(theta, x).data, z0).data.astype(np.float64)
    thresholds = O.margin(z0, mode, rho).astype(np.float64)
    m = thresholds if not mode.adaptive else np.sum(np.square(z0, dtype=np.float64), axis=1) * rho
    top = max(2 * float(np.median(m)) if len(m) else 0.0, float(dist.max()) if len(dist) else 0.0)
    if top <= 0:
        top = 1.0
    counts, edges = np.histogram(dist, bins=N_BINS, range=(0.0, top))
    return ConstraintReport(
        distances=dist,
        thresholds=thresholds,
        constraint_frac=float(np.mean(dist <= thresholds)) if len(dist) else 1.0,
        mean_distance=float(np.mean(dist)) if len(dist) else 0.0,
        bin_edges=edges,
        counts=counts,
    )


def noise_curve(theta, head: PrototypeHead, dataset: Dataset, sigmas, seed=0) -> list[tuple[float, float]]:
    _require_labels(dataset)
    rows = []
    for i, sigma in enumerate(sigmas):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        x = gaussian_corrupt(dataset.inputs, sigma, seed=seed + i)
        rows.append((float(sigma), _accuracy(theta, head, x, dataset.labels)))
    return rows
