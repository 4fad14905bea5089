"""Experiment drivers: the desk task, paired runs, sweeps and the two audits."""

from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import objectives as O
from ..attacks import AttackConfig
from ..models import EncoderParams, PrototypeHead, dual_lambda, encode
from ..optimize import MetricsRecord, TrainConfig, TrainResult, train
from .data import Dataset, synth_blobs
from .evaluation import constraint_report, eval_clean, eval_robust
from .pretrain import pretrain_encoder

# Desk task: ten blobs in the unit cube. Four coordinates carry wide class
# separation; the other 28 are informative but squeezed to a tenth of the
# scale, so an 8/255 perturbation can erase them. Clean accuracy leans on the
# squeezed coordinates and robustness has to give them up.
DESK_DATA = dict(C=10, N=5000, input_dim=32, spread=0.15, seed=0, center_width=0.6,
                 fragile_dims=28, fragile_scale=0.1)
DESK_SPLITS = {"train": 3000, "val": 1000, "probe": 1000}
DESK_DIMS = (32, 64, 32, 16)
DESK_PRETRAIN_EPOCHS = 10
DESK_EPS = (2, 4, 8, 16)
DESK_TRAIN = dict(eta_theta=3e-3, eta_omega=0.05, dual_init_bias=5.0, epochs=20, batch_size=128, log_every=5)

DUALITY_BOUND_TEXT = (
    "R_rho <= R + sqrt(k) * (L*_rho + L') * eps + ||phi*_rho - phi*||; "
    "the Lipschitz constants are not computable here, so only R_rho >= R and "
    "monotonicity in rho are checked"
)


@dataclass
class Lab:
    """Splits, reference encoder and frozen head shared by a batch of runs."""

    train: Dataset
    val: Dataset
    probe: Dataset
    theta_init: EncoderParams
    head: PrototypeHead
    meta: dict = field(default_factory=dict)


def build_lab(data: Dataset, dims=DESK_DIMS, split_seed=1, pretrain_epochs=DESK_PRETRAIN_EPOCHS,
              pretrain_seed=0, splits=None) -> Lab:
    splits = splits or fit_splits(len(data))
    parts = data.split(splits, seed=split_seed)
    dims = [data.input_dim] + list(dims[1:])
    theta = pretrain_encoder(parts["train"], dims, epochs=pretrain_epochs, seed=pretrain_seed)
    z_probe = encode(theta, parts["probe"].inputs).data
    head = PrototypeHead.from_embeddings(z_probe, parts["probe"].labels, data.n_classes)
    meta = {"dims": dims, "splits": splits, "split_seed": split_seed, "pretrain_epochs": pretrain_epochs,
            "pretrain_seed": pretrain_seed,
            "data": {k: v for k, v in data.meta.items() if k != "centers"}}
    return Lab(parts["train"], parts["val"], parts["probe"], theta, head, meta)


def fit_splits(n: int) -> dict:
    if n >= sum(DESK_SPLITS.values()):
        return dict(DESK_SPLITS)
    n_val = n_probe = max(1, n // 5)
    return {"train": n - n_val - n_probe, "val": n_val, "probe": n_probe}


@functools.lru_cache(maxsize=4)
def desk_lab(seed: int = 0) -> Lab:
    """The default synthetic task; cached because pretraining takes seconds."""
    data = synth_blobs(**{**DESK_DATA, "seed": seed})
    return build_lab(data)


def desk_config(method: str = "lore", eps: float = 8, **overrides) -> TrainConfig:
    """Desk-scale hyperparameters; ``eps`` is in 1/255 units."""
    kw = {**DESK_TRAIN, "method": method, "attack": AttackConfig.from_255(eps)}
    kw.update(overrides)
    return TrainConfig(**kw)


def eval_attack(train_attack: AttackConfig, steps: int = 40) -> AttackConfig:
    return dataclasses.replace(train_attack, steps=steps, init="uniform", step_size=None)


def clean_monitor(lab: Lab):
    def monitor(theta, omega, theta0):
        return {"clean_acc": eval_clean(theta, lab.head, lab.val)}
    return monitor


def final_record(lab: Lab, cfg: TrainConfig, result: TrainResult, attack_steps: int = 40,
                 seed: int = 0) -> MetricsRecord:
    """Validation metrics of the final encoder, robust accuracy under PGD with random start."""
    attack = eval_attack(cfg.attack, attack_steps)
    report = constraint_report(result.theta, result.theta0, lab.val, cfg.rho, cfg.margin)
    mean_lambda = 0.0
    if result.omega is not None:
        z0 = encode(result.theta0, lab.val.inputs).data
        mean_lambda = float(np.mean(dual_lambda(result.omega, z0).data, dtype=np.float64))
    last = result.timeline[-1] if result.timeline else None
    return MetricsRecord(
        step=last.step if last else 0,
        epoch=last.epoch if last else 0,
        clean_acc=eval_clean(result.theta, lab.head, lab.val),
        robust_acc=eval_robust(result.theta, lab.head, lab.val, attack, seed=seed),
        mean_lambda=mean_lambda,
        constraint_frac=report.constraint_frac,
        mean_clean_dist=report.mean_distance,
        loss_robust=last.loss_robust if last else math.nan,
        loss_clean=last.loss_clean if last else math.nan,
        loss_total=last.loss_total if last else math.nan,
        attack=attack.stamp(),
    )


@dataclass
class Run:
    cfg: TrainConfig
    result: TrainResult
    final: MetricsRecord

    @property
    def min_clean(self) -> float:
        return min(r.clean_acc for r in self.result.timeline)


def run(lab: Lab, cfg: TrainConfig, track_clean: bool = True, attack_steps: int = 40) -> Run:
    monitor = clean_monitor(lab) if track_clean else None
    result = train(lab.theta_init, lab.train, cfg, head=lab.head, monitor=monitor, probe=lab.probe.inputs[:64])
    return Run(cfg, result, final_record(lab, cfg, result, attack_steps))


def paired_runs(lab: Lab, cfgs: list[TrainConfig], **kw) -> list[Run]:
    """Runs that differ only in their config; seeds, batches and data are shared."""
    seeds = {c.seed for c in cfgs}
    if len(seeds) != 1:
        raise ValueError("paired runs must share a seed")
    return [run(lab, c, **kw) for c in cfgs]


@dataclass
class SweepResult:
    rhos: list[float]
    records: list[MetricsRecord]

    def __post_init__(self):
        if len(self.rhos) != len(self.records):
            raise ValueError("one record per rho required")
        if any(b <= a for a, b in zip(self.rhos, self.rhos[1:])):
            raise ValueError("rho values must be strictly increasing")

    def pareto_rows(self) -> list[dict]:
        return [{"rho": r, "clean_acc": m.clean_acc, "robust_acc": m.robust_acc} for r, m in zip(self.rhos, self.records)]


def sweep_rho(base_cfg: TrainConfig, rho_list, lab: Lab, **kw) -> SweepResult:
    rho_list = [float(r) for r in rho_list]
    if not rho_list:
        raise ValueError("empty rho list")
    if any(b <= a for a, b in zip(rho_list, rho_list[1:])):
        raise ValueError("rho list must be strictly increasing")
    records = [run(lab, dataclasses.replace(base_cfg, rho=r), **kw).final for r in rho_list]
    return SweepResult(rho_list, records)


def k_ablation(base_cfg: TrainConfig, ks, lab: Lab, **kw) -> dict[int, MetricsRecord]:
    return {int(k): run(lab, dataclasses.replace(base_cfg, K=int(k)), **kw).final for k in ks}


# --- cosine-deviation audit ------------------------------------------------

def cosine_audit(rho_list, samples: int = 100_000, dim: int = 16, seed: int = 0) -> list[dict]:
    """Random triples with ``||u_hat - u||^2 <= rho ||u||^2``; count bound violations.

    Half of the perturbations sit exactly on the boundary of the allowed ball,
    where the deviation is largest.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for rho in rho_list:
        u = rng.normal(size=(samples, dim))
        v = rng.normal(size=(samples, dim))
        direction = rng.normal(size=(samples, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        frac = rng.random(samples)
        frac[: samples // 2] = 1.0
        radius = np.sqrt(rho) * np.linalg.norm(u, axis=1) * frac
        u_hat = u + direction * radius[:, None]
        keep = np.linalg.norm(u_hat, axis=1) > 0
        dev = O.cosine_dev(u[keep], u_hat[keep], v[keep])
        bound = O.cosine_dev_bound(rho)
        rows.append({"rho": float(rho), "samples": int(keep.sum()), "violations": int(np.sum(dev > bound)),
                     "max_deviation": float(dev.max()), "bound": bound})
    return rows


# --- weak duality on a linear toy ---------------------------------------------

@dataclass
class ToySpec:
    """Linear encoder ``phi(x) = a x + b`` on scalars, anchored at ``(a0, b0)``.

    ``grid`` maps each free parameter (``a`` and optionally ``b``) to
    ``[lo, hi, n]``; a parameter without a grid is pinned at its anchor.
    """

    a0: float
    b0: float
    data: list[float]
    epsilon: float
    rho_list: list[float]
    grid: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ToySpec":
        try:
            spec = cls(float(d["a0"]), float(d.get("b0", 0.0)), [float(x) for x in d["data"]],
                       float(d["epsilon"]), [float(r) for r in d["rho_list"]], dict(d["grid"]))
        except KeyError as exc:
            raise ValueError(f"toy spec missing field {exc}") from exc
        if not spec.data or spec.epsilon < 0 or not spec.rho_list or any(r < 0 for r in spec.rho_list):
            raise ValueError("toy spec needs data, epsilon >= 0 and non-negative rho values")
        if not set(spec.grid) <= {"a", "b"} or not spec.grid:
            raise ValueError("grid may only cover 'a' and 'b'")
        return spec

    @classmethod
    def load(cls, path) -> "ToySpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def axis(self, name: str) -> np.ndarray:
        anchor = self.a0 if name == "a" else self.b0
        if name not in self.grid:
            return np.array([anchor])
        lo, hi, n = self.grid[name]
        return np.union1d(np.linspace(float(lo), float(hi), int(n)), [anchor])


def toy_adv_loss(a, b, spec: ToySpec) -> np.ndarray:
    """Mean worst-case squared deviation; the inner max is ``(|r| + |a| eps)^2``."""
    x = np.asarray(spec.data)[None, :]
    r = (a[:, None] - spec.a0) * x + (b[:, None] - spec.b0)
    return np.mean((np.abs(r) + np.abs(a[:, None]) * spec.epsilon) ** 2, axis=1)


def toy_max_violation(a, b, spec: ToySpec) -> np.ndarray:
    """Per grid point, max over data of ``d / m`` (inf where the margin is zero but d is not)."""
    x = np.asarray(spec.data)[None, :]
    d = ((a[:, None] - spec.a0) * x + (b[:, None] - spec.b0)) ** 2
    m = (spec.a0 * x + spec.b0) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d == 0, 0.0, d / m)
    return np.max(ratio, axis=1)


def weak_duality_check(toy_spec, chunk: int = 200_000) -> dict:
    spec = toy_spec if isinstance(toy_spec, ToySpec) else ToySpec.from_dict(toy_spec)
    a_axis, b_axis = spec.axis("a"), spec.axis("b")
    rhos = np.asarray(spec.rho_list)
    best = np.full(len(rhos), np.inf)
    feasible = np.zeros(len(rhos), dtype=np.int64)
    unconstrained = np.inf
    aa, bb = np.meshgrid(a_axis, b_axis, indexing="ij")
    aa, bb = aa.ravel(), bb.ravel()
    for s in range(0, len(aa), chunk):
        a, b = aa[s:s + chunk], bb[s:s + chunk]
        loss = toy_adv_loss(a, b, spec)
        ratio = toy_max_violation(a, b, spec)
        unconstrained = min(unconstrained, float(loss.min()))
        for i, rho in enumerate(rhos):
            ok = ratio <= rho
            feasible[i] += int(ok.sum())
            if ok.any():
                best[i] = min(best[i], float(loss[ok].min()))
    rows = [{"rho": float(r), "R_rho": float(v) if n else None, "feasible_points": int(n)}
            for r, v, n in zip(rhos, best, feasible)]
    present = [row for row in rows if row["feasible_points"]]
    order = sorted(present, key=lambda row: row["rho"])
    return {
        "R": unconstrained,
        "rows": rows,
        "grid_points": int(len(aa)),
        "holds": all(row["R_rho"] >= unconstrained for row in present),
        "monotone": all(q["R_rho"] <= p["R_rho"] for p, q in zip(order, order[1:])),
        "empty": [row["rho"] for row in rows if not row["feasible_points"]],
        "bound": DUALITY_BOUND_TEXT,
    }
