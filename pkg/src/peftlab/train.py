"""Deterministic fine-tuning loop: AdamW, cosine warmup schedule, grid
search, linear-probe / full fine-tuning baselines, and synthetic tasks.

Synthetic tasks come in a pretrain/downstream distribution pair: the
backbone is pretrained on the first, fine-tuning methods adapt to the
second, so adaptation quality is measurable without external datasets.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, cross_entropy_logits, zero_grads
from .peft import PeftModel
from .vit import ViTConfig, ViTModel, forward, init_model

__all__ = [
    "TrainingConfig",
    "GridSearchSpace",
    "SyntheticTaskSpec",
    "Dataset",
    "TrainingDiverged",
    "adamw_step",
    "AdamWState",
    "cosine_warmup_lr",
    "make_synthetic_task",
    "pretrain_backbone",
    "train",
    "linear_probe",
    "full_finetune",
    "grid_search",
    "evaluate",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")


@dataclass
class TrainingConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    dropout_rate: float = 0.0
    batch_size: int = 32
    epochs: int = 100
    warmup_epochs: int = 10
    seed: int = 0
    precision: str = "f32"
    max_steps: int | None = None

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs and self.epochs > 0:
            raise ValueError(
                f"warmup_epochs {self.warmup_epochs} must be below epochs {self.epochs}"
            )
        if min(self.learning_rate, self.weight_decay, self.dropout_rate) < 0:
            raise ValueError("rates must be non-negative")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class GridSearchSpace:
    learning_rates: list[float] = field(default_factory=lambda: [0.01])
    weight_decays: list[float] = field(default_factory=lambda: [0.0])
    dropout_rates: list[float] = field(default_factory=lambda: [0.0])
    batch_sizes: list[int] = field(default_factory=lambda: [32])

    def __post_init__(self):
        for name in ("learning_rates", "weight_decays", "dropout_rates", "batch_sizes"):
            if not getattr(self, name):
                raise ValueError(f"grid axis {name} must be non-empty")

    def cells(self):
        return itertools.product(
            self.learning_rates, self.weight_decays, self.dropout_rates, self.batch_sizes
        )


# -- optimizer ---------------------------------------------------------


class AdamWState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update: decoupled decay first, then bias-corrected Adam.

    Frozen tensors and tensors without a gradient entry are untouched.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name in sorted(params):
        p = params[name]
        if not p.requires_grad or name not in grads:
            continue
        g = grads[name].astype(np.float64)
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        if weight_decay > 0.0:
            p.data *= np.asarray(1.0 - lr * weight_decay, dtype=p.dtype)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data -= (lr * update).astype(p.dtype)


def cosine_warmup_lr(epoch: int, config: TrainingConfig) -> float:
    """Linear ramp to the peak over warmup, then cosine decay to zero."""
    if not (0 <= epoch < config.epochs):
        raise ValueError(f"epoch {epoch} outside 0..{config.epochs - 1}")
    peak = config.learning_rate
    if epoch < config.warmup_epochs:
        return peak * epoch / config.warmup_epochs
    span = config.epochs - config.warmup_epochs
    t = (epoch - config.warmup_epochs) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * t))


# -- synthetic tasks ---------------------------------------------------


@dataclass
class SyntheticTaskSpec:
    seed: int = 0
    classes: int = 4
    images_per_class: int = 32
    val_per_class: int = 8
    test_per_class: int = 8
    image_h: int = 8
    image_w: int = 8
    channels: int = 1
    noise: float = 0.35
    shift_mix: float = 0.0  # 0 = downstream equals pretrain distribution
    shift_gain: float = 0.0  # amplitude of the fixed multiplicative pixel field
    downstream_noise: float | None = None


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def _sample_split(rng, prototypes, per_class, noise):
    xs, ys = [], []
    for c, proto in enumerate(prototypes):
        for _ in range(per_class):
            xs.append(proto + rng.normal(0.0, noise, proto.shape))
            ys.append(c)
    xs = np.stack(xs)
    ys = np.asarray(ys, dtype=np.int64)
    order = rng.permutation(len(ys))
    return xs[order], ys[order]


def make_synthetic_task(spec: SyntheticTaskSpec, downstream: bool = False) -> Dataset:
    """Seeded class-prototype images plus Gaussian noise.

    The downstream distribution rotates each prototype toward a fresh
    pattern (by `shift_mix`) and applies a fixed random multiplicative
    pixel field (strength `shift_gain`), so frozen features degrade while
    the class structure stays learnable.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.image_h, spec.image_w, spec.channels)
    prototypes = [rng.normal(0.0, 1.0, shape) for _ in range(spec.classes)]
    fresh = [rng.normal(0.0, 1.0, shape) for _ in range(spec.classes)]
    gain_field = 1.0 + spec.shift_gain * rng.normal(0.0, 1.0, shape)

    noise = spec.noise
    if downstream:
        theta = spec.shift_mix * math.pi / 2.0
        prototypes = [
            (math.cos(theta) * p + math.sin(theta) * q) * gain_field
            for p, q in zip(prototypes, fresh)
        ]
        if spec.downstream_noise is not None:
            noise = spec.downstream_noise

    split_rng = np.random.default_rng(spec.seed + (1_000_003 if downstream else 0))
    train_x, train_y = _sample_split(split_rng, prototypes, spec.images_per_class, noise)
    val_x, val_y = _sample_split(split_rng, prototypes, spec.val_per_class, noise)
    test_x, test_y = _sample_split(split_rng, prototypes, spec.test_per_class, noise)
    return Dataset(train_x, train_y, val_x, val_y, test_x, test_y)


# -- training loop -----------------------------------------------------


def _batch_loss(forward_fn, xs, ys) -> tuple[Tensor, int]:
    total = None
    correct = 0
    for x, y in zip(xs, ys):
        logits = forward_fn(x)
        if int(np.argmax(logits.data)) == y:
            correct += 1
        loss = cross_entropy_logits(logits.reshape(1, -1), int(y))
        total = loss if total is None else total + loss
    return total / len(ys), correct


def evaluate(forward_fn, xs, ys) -> float:
    correct = 0
    for x, y in zip(xs, ys):
        logits = forward_fn(x)
        if int(np.argmax(logits.data)) == y:
            correct += 1
    return correct / len(ys)


def run_training(
    params: dict[str, Tensor],
    train_forward,
    eval_forward,
    task: Dataset,
    config: TrainingConfig,
) -> list[dict]:
    """Shared epoch loop; returns per-epoch metric rows.

    `train_forward(x, rng)` may apply dropout; `eval_forward(x)` must not.
    Aborts with TrainingDiverged on a non-finite loss.
    """
    rng = np.random.default_rng(config.seed)
    state = AdamWState()
    history: list[dict] = []
    steps_done = 0
    n = len(task.train_y)
    for epoch in range(config.epochs):
        lr = cosine_warmup_lr(epoch, config)
        order = rng.permutation(n)
        losses = []
        correct = 0
        for start in range(0, n, config.batch_size):
            if config.max_steps is not None and steps_done >= config.max_steps:
                break
            idx = order[start : start + config.batch_size]
            zero_grads(params)
            loss, batch_correct = _batch_loss(
                lambda x: train_forward(x, rng), task.train_x[idx], task.train_y[idx]
            )
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, steps_done, value)
            loss.backward()
            grads = {
                k: p.grad for k, p in params.items() if p.grad is not None and p.requires_grad
            }
            adamw_step(params, grads, state, lr, config.weight_decay)
            losses.append(value)
            correct += batch_correct
            steps_done += 1
        if not losses:
            break
        val_acc = evaluate(eval_forward, task.val_x, task.val_y)
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "train_acc": correct / n,
                "val_acc": val_acc,
            }
        )
        if config.max_steps is not None and steps_done >= config.max_steps:
            break
    return history


def train(pm: PeftModel, task: Dataset, config: TrainingConfig) -> list[dict]:
    """Fine-tune attached method parameters (plus head) on a task."""
    params = pm.trainable()

    def train_forward(x, rng):
        return pm.forward(x, drop_rate=config.dropout_rate, rng=rng)

    return run_training(params, train_forward, pm.forward, task, config)


def linear_probe(model: ViTModel, task: Dataset, config: TrainingConfig) -> list[dict]:
    """Train the classification head only; everything else frozen."""
    model.freeze_all()
    model.slot("head").unfreeze()
    params = model.trainable()

    def fwd(x, rng=None):
        return forward(x, model)

    return run_training(params, fwd, fwd, task, config)


def full_finetune(model: ViTModel, task: Dataset, config: TrainingConfig) -> list[dict]:
    """Update every parameter of the model."""
    model.unfreeze_all()
    params = model.trainable()

    def train_forward(x, rng):
        return forward(x, model, drop_rate=config.dropout_rate, rng=rng)

    def eval_forward(x):
        return forward(x, model)

    return run_training(params, train_forward, eval_forward, task, config)


def pretrain_backbone(
    vit_config: ViTConfig, spec: SyntheticTaskSpec, config: TrainingConfig, seed: int = 0
) -> ViTModel:
    """Produce the frozen 'pretrained' backbone from the pretrain distribution."""
    model = init_model(vit_config, seed=seed, dtype=config.dtype)
    task = make_synthetic_task(spec, downstream=False)
    full_finetune(model, task, config)
    model.freeze_all()
    return model


# -- grid search -------------------------------------------------------


def grid_search(
    space: GridSearchSpace, run_cell, base_config: TrainingConfig
) -> tuple[TrainingConfig, list[dict]]:
    """Exhaustive sweep; best cell by validation accuracy.

    `run_cell(config)` returns a metrics history (or raises
    TrainingDiverged, which scores the cell at -inf).  Ties break toward
    lower learning rate, then lower weight decay, then declaration order.
    """
    leaderboard = []
    for order, (lr, wd, dr, bs) in enumerate(space.cells()):
        config = replace(
            base_config,
            learning_rate=lr,
            weight_decay=wd,
            dropout_rate=dr,
            batch_size=bs,
        )
        try:
            history = run_cell(config)
            best_val = max((row["val_acc"] for row in history), default=float("-inf"))
            diverged = False
        except TrainingDiverged:
            best_val = float("-inf")
            diverged = True
        leaderboard.append(
            {
                "learning_rate": lr,
                "weight_decay": wd,
                "dropout_rate": dr,
                "batch_size": bs,
                "val_acc": best_val,
                "diverged": diverged,
                "order": order,
            }
        )
    leaderboard.sort(
        key=lambda row: (
            -row["val_acc"],
            row["learning_rate"],
            row["weight_decay"],
            row["order"],
        )
    )
    best = leaderboard[0]
    best_config = replace(
        base_config,
        learning_rate=best["learning_rate"],
        weight_decay=best["weight_decay"],
        dropout_rate=best["dropout_rate"],
        batch_size=best["batch_size"],
    )
    return best_config, leaderboard
