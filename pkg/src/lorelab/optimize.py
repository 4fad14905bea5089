"""Alternating primal-dual trainer, its baselines, optimizers and schedules.

Per batch the trainer runs: one attack, ``K`` primal updates of the encoder
with the perturbation held fixed, then (for the constrained methods) a single
ascent step on the multiplier network using the post-primal constraint
residuals as constant coefficients.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import objectives as O
from . import tensor as T
from .attacks import AttackConfig, pgd_classification, pgd_embedding
from .models import (
    DualNetParams,
    EncoderParams,
    PrototypeHead,
    ReferenceEncoder,
    ScalarDual,
    dual_lambda,
    encode,
    freeze,
    prototype_log_probs,
    prototype_probs,
)
from .tensor import Tape

log = logging.getLogger(__name__)

LORE = "lore"
FARE = "fare"
NAIVE_REG = "naive-reg"
TECOA = "tecoa"
TECOA_L2 = "tecoa-l2"
TECOA_KL = "tecoa-kl"
METHODS = (LORE, FARE, NAIVE_REG, TECOA, TECOA_L2, TECOA_KL)
DUAL_METHODS = (LORE, TECOA_L2, TECOA_KL)
SUPERVISED = (TECOA, TECOA_L2, TECOA_KL)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Sgd:
    weight_decay: float = 0.0


@dataclass(frozen=True)
class AdaptiveMoment:
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class Constant:
    pass


@dataclass(frozen=True)
class Cosine:
    min_factor: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    method: str = LORE
    rho: float = 0.1
    K: int = 5
    eta_theta: float = 1e-3
    eta_omega: float = 5e-4
    epochs: int = 1
    batch_size: int = 128
    seed: int = 0
    margin: O.MarginMode = O.ADAPTIVE
    attack: AttackConfig = AttackConfig.from_255(2)
    optimizer: Sgd | AdaptiveMoment = AdaptiveMoment()
    schedule: Constant | Cosine = Cosine()
    naive_lambda: float = 0.0
    dual: str = "network"
    dual_hidden: int = 32
    dual_init_bias: float = 0.0
    log_every: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not (self.eta_theta >= 0 and self.eta_omega >= 0):
            raise ValueError("learning rates must be non-negative")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and log_every >= 1 required")
        if self.dual not in ("network", "scalar"):
            raise ValueError("dual must be 'network' or 'scalar'")

    @property
    def uses_dual(self) -> bool:
        return self.method in DUAL_METHODS

    def manifest(self) -> dict:
        out = asdict(self)
        out["margin"] = str(self.margin)
        out["optimizer"] = {"kind": type(self.optimizer).__name__, **asdict(self.optimizer)}
        out["schedule"] = {"kind": type(self.schedule).__name__, **asdict(self.schedule)}
        out["attack"] = {**asdict(self.attack), "step_size": self.attack.eta, "stamp": self.attack.stamp()}
        return out


@dataclass
class OptimizerState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, arrays, adaptive: bool) -> "OptimizerState":
        if not adaptive:
            return cls()
        return cls(0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adaptive_update(params, grads, state: OptimizerState, lr, beta1=0.9, beta2=0.999,
                    eps_hat=1e-8, weight_decay=0.0):
    """Bias-corrected adaptive-moment step with decoupled weight decay."""
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter required")
    if not state.m:
        state = OptimizerState.for_params(params, adaptive=True)
    t = state.step + 1
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape}")
        p = p.astype(np.float64)
        g = g.astype(np.float64)
        p = p - lr * weight_decay * p
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + eps_hat)
        new_params.append(p.astype(np.float32))
        new_m.append(m)
        new_v.append(v)
    return new_params, OptimizerState(t, new_m, new_v)


def sgd_update(params, grads, lr, weight_decay=0.0):
    return [
        (p.astype(np.float64) * (1 - lr * weight_decay) - lr * g.astype(np.float64)).astype(np.float32)
        for p, g in zip(params, grads)
    ]


def cosine_schedule(step: int, total_steps: int, lr_max: float, min_factor: float = 0.0) -> float:
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_max
    return lr_max * (min_factor + (1 - min_factor) * (1 + math.cos(math.pi * step / total_steps)) / 2)


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if isinstance(cfg.schedule, Cosine):
        return cosine_schedule(min(step, total_steps), total_steps, cfg.eta_theta, cfg.schedule.min_factor)
    return cfg.eta_theta


def apply_update(cfg: TrainConfig, arrays, grads, state: OptimizerState, lr):
    opt = cfg.optimizer
    if isinstance(opt, AdaptiveMoment):
        return adaptive_update(arrays, grads, state, lr, opt.beta1, opt.beta2, opt.eps_hat, opt.weight_decay)
    return sgd_update(arrays, grads, lr, opt.weight_decay), OptimizerState(state.step + 1)


@dataclass
class Batch:
    """One minibatch with the quantities that stay fixed across its K-loop."""

    x: np.ndarray
    y: np.ndarray | None
    z0: np.ndarray
    p0: np.ndarray | None = None

    @classmethod
    def build(cls, x, y, theta0: ReferenceEncoder, head: PrototypeHead | None = None, kl: bool = False):
        z0 = encode(theta0, x).data
        p0 = prototype_probs(head, z0).data.astype(np.float64) if kl else None
        return cls(np.asarray(x, dtype=np.float32), y, z0, p0)


def constraint_residual(cfg: TrainConfig, z_clean, batch: Batch, head=None) -> T.Tensor:
    if cfg.method == TECOA_KL:
        return O.kl_constraint_loss(T.exp(prototype_log_probs(head, z_clean)), batch.p0, cfg.rho)
    return O.lore_clean_loss(z_clean, batch.z0, cfg.rho, cfg.margin)


def method_loss(cfg: TrainConfig, theta, omega, batch: Batch, delta, head=None,
                zero_lambda: bool = False) -> O.LossBreakdown:
    """Training objective for ``cfg.method``; ``theta`` may be taped tensors."""
    x_adv = batch.x + delta
    z_adv = encode(theta, x_adv)
    if cfg.method in SUPERVISED:
        if head is None or batch.y is None:
            raise ValueError(f"{cfg.method} needs labels and a prototype head")
        robust = O.tecoa_loss(z_adv, head, batch.y)
    else:
        robust = O.sq_l2_dist(z_adv, batch.z0)

    if cfg.uses_dual:
        if zero_lambda:
            lam = np.zeros(batch.x.shape[0], dtype=np.float32)
        else:
            lam = dual_lambda(omega, batch.z0).data
        return O.combine(robust, constraint_residual(cfg, encode(theta, batch.x), batch, head), lam)

    # no multiplier machinery: report the constraint but keep it off the tape
    theta_const = [T.Tensor(t.data) for t in theta] if isinstance(theta, list) else theta
    clean = O.lore_clean_loss(encode(theta_const, batch.x), batch.z0, cfg.rho, cfg.margin)
    zeros = np.zeros(batch.x.shape[0], dtype=np.float32)
    if cfg.method == FARE:
        out = O.combine(robust, clean, zeros)
        out.objective = T.mean(robust)
    elif cfg.method == NAIVE_REG:
        out = O.combine(robust, clean, zeros)
        out.objective = O.naive_reg_loss(z_adv, encode(theta, batch.x), batch.z0, cfg.naive_lambda)
    else:
        out = O.combine(robust, clean, zeros)
    out.total = float(out.objective.data)
    return out


def primal_step(theta: EncoderParams, omega, batch: Batch, delta, cfg: TrainConfig,
                state: OptimizerState, lr: float, head=None, zero_lambda: bool = False):
    """One optimizer step on the encoder; the multipliers are constants here."""
    tape = Tape()
    watched = theta.on(tape)
    out = method_loss(cfg, watched, omega, batch, delta, head, zero_lambda)
    if not np.isfinite(out.total):
        raise TrainingError(f"non-finite loss {out.total}")
    grads = tape.gradient(out.objective, watched)
    if lr == 0:
        return theta, out, OptimizerState(state.step + 1, state.m, state.v)
    arrays, state = apply_update(cfg, theta.arrays(), grads, state, lr)
    return theta.with_arrays(arrays), out, state


def dual_step(omega, theta, batch: Batch, cfg: TrainConfig, head=None):
    """Gradient ascent on ``mean_i[c_i * lambda(x_i)]`` with residuals ``c`` held fixed."""
    z_clean = encode(theta, batch.x)
    coeff = constraint_residual(cfg, z_clean, batch, head).data
    tape = Tape()
    watched = omega.on(tape)
    lam = dual_lambda(watched, batch.z0)
    objective = T.mean(lam * coeff)
    grads = tape.gradient(objective, watched)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite multiplier gradient")
    new = [(a.astype(np.float64) + cfg.eta_omega * g).astype(np.float32) for a, g in zip(omega.arrays(), grads)]
    return omega.with_arrays(new)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    clean_acc: float = float("nan")
    robust_acc: float = float("nan")
    mean_lambda: float = 0.0
    constraint_frac: float = float("nan")
    mean_clean_dist: float = float("nan")
    loss_robust: float = float("nan")
    loss_clean: float = float("nan")
    loss_total: float = float("nan")
    attack: str = ""

    def __post_init__(self):
        for name in ("clean_acc", "robust_acc", "constraint_frac"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    theta: EncoderParams
    omega: DualNetParams | ScalarDual | None
    theta0: ReferenceEncoder
    timeline: list[MetricsRecord]
    primal_per_dual: list[int] = field(default_factory=list)
    delta_stable: bool = True
    reference_hashes: list[str] = field(default_factory=list)


def init_dual(cfg: TrainConfig, embed_dim: int, seed) -> DualNetParams | ScalarDual:
    if cfg.dual == "scalar":
        return ScalarDual.init(cfg.dual_init_bias)
    return DualNetParams.init(embed_dim, cfg.dual_hidden, seed=seed, out_bias=cfg.dual_init_bias)


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


Monitor = Callable[[EncoderParams, object, ReferenceEncoder], dict]


def train(theta_init: EncoderParams, data, cfg: TrainConfig, head: PrototypeHead | None = None,
          monitor: Monitor | None = None, omega_init=None, probe: np.ndarray | None = None,
          force_zero_lambda: bool = False) -> TrainResult:
    """Fine-tune ``theta_init`` on ``data`` (anything with ``.inputs``/``.labels``).

    ``monitor(theta, omega, theta0)`` is called at each logging point and its
    dict is merged into the :class:`MetricsRecord`. ``force_zero_lambda``
    pins every multiplier to zero (used to compare against the unconstrained
    baseline).
    """
    inputs = np.asarray(data.inputs, dtype=np.float32)
    labels = getattr(data, "labels", None)
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if cfg.method in SUPERVISED and (labels is None or head is None):
        raise ValueError(f"{cfg.method} needs labels and a prototype head")

    rng = np.random.default_rng(cfg.seed)
    order_rng, attack_rng, dual_rng = rng.spawn(3)
    theta0 = freeze(theta_init)
    theta = copy.deepcopy(theta_init)
    omega = omega_init if omega_init is not None else init_dual(cfg, theta.embed_dim, dual_rng)
    state = OptimizerState.for_params(theta.arrays(), isinstance(cfg.optimizer, AdaptiveMoment))

    n_batches = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * n_batches * cfg.K
    result = TrainResult(theta, omega if cfg.uses_dual else None, theta0, [])
    if probe is not None:
        result.reference_hashes.append(_digest(encode(theta0, probe).data))

    step = 0
    batch_index = 0
    primal_since_dual = 0
    last: O.LossBreakdown | None = None
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            y = None if labels is None else np.asarray(labels)[idx]
            batch = Batch.build(inputs[idx], y, theta0, head, kl=cfg.method == TECOA_KL)
            if cfg.method in SUPERVISED:
                delta = pgd_classification(batch.x, y, theta, head, cfg.attack, rng=attack_rng)
            else:
                delta = pgd_embedding(batch.x, theta, theta0, cfg.attack, rng=attack_rng)
            delta_hash = _digest(delta)
            delta.flags.writeable = False

            for _ in range(cfg.K):
                lr = learning_rate(cfg, step, total_steps)
                try:
                    theta, last, state = primal_step(
                        theta, omega, batch, delta, cfg, state, lr, head, force_zero_lambda
                    )
                except (TrainingError, T.NonFiniteError) as exc:
                    raise TrainingError(f"primal step {step} (epoch {epoch}, batch {b}): {exc}") from exc
                step += 1
                primal_since_dual += 1
            if _digest(delta) != delta_hash:
                result.delta_stable = False
            if cfg.uses_dual and not force_zero_lambda:
                try:
                    omega = dual_step(omega, theta, batch, cfg, head)
                except (TrainingError, T.NonFiniteError) as exc:
                    raise TrainingError(f"dual step after primal step {step}: {exc}") from exc
                result.primal_per_dual.append(primal_since_dual)
                primal_since_dual = 0
            batch_index += 1
            final = epoch == cfg.epochs - 1 and b == n_batches - 1
            if batch_index % cfg.log_every == 0 or final:
                result.timeline.append(_record(batch_index, epoch, theta, omega, theta0, batch, cfg, last, monitor, head))
        if probe is not None:
            result.reference_hashes.append(_digest(encode(theta0, probe).data))

    result.theta = theta
    result.omega = omega if cfg.uses_dual else None
    return result


def _record(step, epoch, theta, omega, theta0, batch, cfg, last, monitor, head) -> MetricsRecord:
    dist = O.sq_l2_dist(encode(theta, batch.x), batch.z0).data
    thresholds = O.margin(batch.z0, cfg.margin, cfg.rho)
    fields = dict(
        step=step,
        epoch=epoch,
        constraint_frac=float(np.mean(dist <= thresholds)),
        mean_clean_dist=float(np.mean(dist, dtype=np.float64)),
        attack=cfg.attack.stamp(),
    )
    if last is not None:
        fields.update(last.fields())
    if monitor is not None:
        fields.update(monitor(theta, omega if cfg.uses_dual else None, theta0))
    return MetricsRecord(**fields)
