"""l-infinity PGD against embedding distance or prototype cross-entropy.

The encoder is only ever read: each attack step records a fresh tape that
watches the perturbed input alone, so no gradient reaches the parameters.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .models import PrototypeHead, encode, prototype_log_probs
from .objectives import sq_l2_dist
from .tensor import Tape

log = logging.getLogger(__name__)

ZERO = "zero"
UNIFORM = "uniform"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 10
    step_size: float | None = None
    init: str = ZERO
    clamp: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.init not in (ZERO, UNIFORM):
            raise ValueError(f"unknown init {self.init!r}")
        lo, hi = self.clamp
        if not lo < hi:
            raise ValueError("clamp range must satisfy lo < hi")
        if self.step_size is not None and self.steps > 0 and not self.step_size > 0:
            raise ValueError("step size must be positive")

    @property
    def eta(self) -> float:
        """Step size; a quarter of the radius unless set explicitly."""
        return self.epsilon / 4 if self.step_size is None else self.step_size

    @classmethod
    def from_255(cls, n: float, **kw) -> "AttackConfig":
        return cls(epsilon=n / 255.0, **kw)

    def evaluation(self, steps: int = 40) -> "AttackConfig":
        """Stronger variant used for reporting: more steps, random start."""
        return replace(self, steps=steps, init=UNIFORM)

    def stamp(self) -> str:
        return f"pgd{self.steps}-{self.init}-eps{self.epsilon * 255:g}/255-eta{self.eta * 255:g}/255"


def project_linf(delta, epsilon: float, x, clamp=(0.0, 1.0)) -> np.ndarray:
    """Clip to the epsilon box, then keep ``x + delta`` inside ``clamp``."""
    lo, hi = clamp
    delta = np.clip(delta, -epsilon, epsilon)
    return (np.clip(x + delta, lo, hi) - x).astype(np.float32)


def _start(x, cfg: AttackConfig, rng) -> np.ndarray:
    if cfg.init == UNIFORM and cfg.epsilon > 0:
        rng = np.random.default_rng(rng)
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape)
    else:
        delta = np.zeros_like(x)
    return project_linf(delta, cfg.epsilon, x, cfg.clamp)


def _pgd(x, cfg: AttackConfig, objective, rng=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    lo, hi = cfg.clamp
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("inputs outside the clamp range")
    delta = _start(x, cfg, rng)
    if cfg.epsilon == 0:
        return delta
    eta = np.float32(cfg.eta)
    for step in range(cfg.steps):
        tape = Tape()
        xd = tape.watch(x + delta)
        try:
            (g,) = tape.gradient(objective(xd), [xd])
        except T.NonFiniteError as exc:
            warnings.warn(f"PGD aborted at step {step}: {exc}", RuntimeWarning, stacklevel=3)
            return delta
        delta = project_linf(delta + eta * np.sign(g), cfg.epsilon, x, cfg.clamp)
    return delta


def pgd_embedding(x, theta, theta0, cfg: AttackConfig, rng=None) -> np.ndarray:
    """Perturbation that pushes ``phi_theta(x + delta)`` away from ``phi_theta0(x)``."""
    z0 = encode(theta0, x).data
    return _pgd(x, cfg, lambda xd: T.sum_(sq_l2_dist(encode(theta, xd), z0)), rng)


def pgd_classification(x, y, theta, head: PrototypeHead, cfg: AttackConfig, rng=None) -> np.ndarray:
    """Perturbation ascending the prototype classifier's cross-entropy."""
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= head.n_classes):
        raise ValueError("label out of range")
    return _pgd(
        x,
        cfg,
        lambda xd: -T.sum_(T.pick(prototype_log_probs(head, encode(theta, xd)), y)),
        rng,
    )


def gaussian_corrupt(x, sigma: float, seed=0, clamp=(0.0, 1.0)) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, dtype=np.float32)
    if sigma == 0:
        return x.copy()
    noise = np.random.default_rng(seed).normal(0.0, sigma, x.shape)
    return np.clip(x + noise, *clamp).astype(np.float32)
