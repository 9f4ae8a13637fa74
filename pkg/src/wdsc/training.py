"""AMSGrad optimization, plateau learning-rate decay and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import StereoPair
from .model import FACTORIZED, WynerModel, loss, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "loss", "R_x", "D_x", "R_y", "D_y", "R_w", "lr")


@dataclass
class TrainConfig:
    lmbda: float = 0.01 * 255**2
    alpha: float = 1.0
    beta: float = 1.0
    metric: str = "mse"
    variant: str = FACTORIZED
    lr: float = 1e-4
    lr_floor: float = 1e-7
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    max_iters: int = 500_000
    batch_size: int = 1
    seed: int = 0
    n: int = 192
    n_w: Optional[int] = None
    val_every: int = 500
    log_every: int = 100
    lambda_id: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.lmbda <= 0:
            raise ValueError("lambda must be positive")
        if not self.lr_floor <= self.lr:
            raise ValueError("lr_floor must not exceed lr")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            raw = json.load(fh)
        if "lambda" in raw:
            raw["lmbda"] = raw.pop("lambda")
        unknown = set(raw) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


class AMSGrad:
    """Adam with the running maximum of the second moment in the denominator."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.v_max = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {i} {p.shape}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            np.maximum(self.v_max[i], self.v[i], out=self.v_max[i])
            m_hat = self.m[i] / c1
            v_hat = self.v_max[i] / c2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class PlateauSchedule:
    """Divide the rate by 10 after ``patience`` evaluations without relative improvement."""

    def __init__(self, lr: float, floor: float = 1e-7, patience: int = 5, threshold: float = 1e-4):
        self.lr = lr
        self.floor = floor
        self.patience = patience
        self.threshold = threshold
        self.best = np.inf
        self.stale = 0

    def update(self, value: float) -> float:
        improved = not np.isfinite(self.best) or value < self.best - self.threshold * abs(self.best)
        if improved:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr / 10.0, self.floor)
                self.stale = 0
        return self.lr


def lr_schedule(history: Sequence[float], lr: float, floor: float = 1e-7, patience: int = 5, threshold: float = 1e-4) -> float:
    """Learning rate after replaying a history of validation losses."""
    sched = PlateauSchedule(lr, floor, patience, threshold)
    for value in history:
        sched.update(value)
    return sched.lr


def optimizer_step(opt: AMSGrad) -> None:
    opt.step()


def _stack(pairs: Sequence[StereoPair], dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.left for p in pairs]).astype(dtype)
    y = np.stack([p.right for p in pairs]).astype(dtype)
    return x, y


def evaluate_loss(model: WynerModel, pairs: Sequence[StereoPair], cfg: TrainConfig, side_branch: Optional[bool] = None) -> float:
    """Mean loss with rounding in place of noise (no randomness)."""
    if side_branch is None:
        side_branch = cfg.alpha > 0
    total = 0.0
    with T.no_grad():
        for p in pairs:
            out = model.forward_train(p.left, p.right, noise=False, side_branch=side_branch)
            total += float(loss(out.terms, cfg.lmbda, cfg.alpha, cfg.beta).data)
    return total / max(len(pairs), 1)


@dataclass
class TrainResult:
    model: WynerModel
    log_rows: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    diverged: bool = False
    seconds: float = 0.0


def train(
    cfg: TrainConfig,
    train_pairs: Sequence[StereoPair],
    val_pairs: Sequence[StereoPair] = (),
    model: Optional[WynerModel] = None,
    log_path=None,
    ckpt_path=None,
) -> TrainResult:
    """Optimize ``cfg``'s loss over ``train_pairs`` for ``cfg.max_iters`` steps.

    Pairs are visited in a seeded random order, one batch per step.  If the
    loss becomes non-finite, training stops, the last good weights are
    restored, and ``diverged`` is set.  Tables are frozen at the end.
    """
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ValueError("no training pairs")
    dtype = np.dtype(cfg.dtype)
    if model is None:
        model = WynerModel(n=cfg.n, n_w=cfg.n_w, variant=cfg.variant, metric=cfg.metric, seed=cfg.seed, dtype=dtype, lambda_id=cfg.lambda_id)
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.parameters()
    opt = AMSGrad(params, lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, cfg.lr_floor, cfg.plateau_patience, cfg.plateau_threshold)
    side_branch = cfg.alpha > 0
    result = TrainResult(model)
    last_good = [p.data.copy() for p in params]
    start = time.perf_counter()
    order = rng.permutation(len(train_pairs))
    cursor = 0

    for it in range(1, cfg.max_iters + 1):
        batch = []
        for _ in range(cfg.batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(train_pairs)), 0
            batch.append(train_pairs[order[cursor]])
            cursor += 1
        x, y = _stack(batch, dtype)
        try:
            out = model.forward_train(x, y, rng, side_branch=side_branch)
            total = loss(out.terms, cfg.lmbda, cfg.alpha, cfg.beta)
            opt.zero_grad()
            total.backward()
            opt.step()
        except FloatingPointError as exc:
            log.error("diverged at iteration %d: %s; restoring last good weights", it, exc)
            for p, saved in zip(params, last_good):
                p.data = saved
            result.diverged = True
            break

        if it % cfg.log_every == 0 or it == 1:
            vals = out.terms.values()
            row = {"iter": it, "loss": float(total.data), "lr": opt.lr}
            row.update({k: vals[k] for k in ("R_x", "D_x", "R_y", "D_y", "R_w")})
            result.log_rows.append(row)
            last_good = [p.data.copy() for p in params]

        if val_pairs and it % cfg.val_every == 0:
            v = evaluate_loss(model, val_pairs, cfg)
            result.val_history.append((it, v))
            opt.lr = sched.update(v)

    model.update_tables()
    model.train_info = {"lambda": cfg.lmbda, "alpha": cfg.alpha, "beta": cfg.beta, "iters": it}
    result.seconds = time.perf_counter() - start
    if log_path is not None:
        write_log(result.log_rows, log_path)
    if ckpt_path is not None:
        save_checkpoint(model, ckpt_path)
    return result


def write_log(rows: Iterable[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
