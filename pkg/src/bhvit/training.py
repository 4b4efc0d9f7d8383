"""Regularized distillation loss, AdamW with flip instrumentation, and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, iterate_batches
from .errors import BHViTError, ConfigError, DomainError, ShapeError
from .model import BHViT

A_MIN = 1e-3
RL_REDUCTIONS = ("mean", "layer_sum")


class TrainingDiverged(BHViTError, FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.0
    beta_value: float = 0.1
    beta_start: float = 0.9
    use_rl: bool = True
    # "mean": one mean over every latent weight; "layer_sum": sum of per-layer means
    rl_reduction: str = "mean"
    lr: float = 5e-4
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    train_subset: int | None = None
    eval_subset: int | None = None
    augment: bool = True
    prefetch: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self):
        if not 0.0 <= self.lam < 1.0:
            raise ConfigError(f"lam must lie in [0, 1), got {self.lam}")
        if self.beta_value < 0 or self.lam + self.beta_value >= 1.0:
            raise ConfigError("need beta_value >= 0 and lam + beta_value < 1")
        if not 0.0 <= self.beta_start <= 1.0:
            raise ConfigError("beta_start is a fraction of the epoch budget")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.rl_reduction not in RL_REDUCTIONS:
            raise ConfigError(f"rl_reduction must be one of {RL_REDUCTIONS}")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def rl_active(self, epoch: int) -> bool:
        return self.use_rl and self.beta_value > 0 and epoch >= self.beta_start * self.epochs

    def loss_weights(self, epoch: int, has_teacher: bool = True) -> tuple[float, float, float]:
        """``(w_cls, w_dis, w_re)`` for a 0-based epoch; they always sum to 1."""
        lam = self.lam if has_teacher else 0.0
        beta = self.beta_value if self.rl_active(epoch) else 0.0
        return 1.0 - lam - beta, lam, beta


# -- loss terms ------------------------------------------------------------------
def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    logp = ag.log_softmax(logits, axis=-1)
    return -logp[np.arange(len(labels)), labels].mean()


def distillation_loss(logits: Tensor, teacher_logits: np.ndarray) -> Tensor:
    """Cross-entropy of student log-probabilities against teacher soft targets."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float32)
    if teacher_logits.shape != logits.shape:
        raise ShapeError(f"teacher logits {teacher_logits.shape} vs student {logits.shape}")
    z = teacher_logits - teacher_logits.max(axis=-1, keepdims=True)
    target = np.exp(z)
    target /= target.sum(axis=-1, keepdims=True)
    return -(ag.log_softmax(logits, axis=-1) * target).sum(axis=-1).mean()


def regularization_loss(weights, reduction: str = "mean") -> Tensor:
    """``mean_i | |w_i| - 1 |`` over all given latent weights.

    ``reduction="layer_sum"`` instead adds up one such mean per tensor.
    """
    weights = list(weights)
    n = sum(w.size for w in weights)
    if n == 0:
        return Tensor(np.zeros((), dtype=np.float32))
    if reduction not in RL_REDUCTIONS:
        raise ConfigError(f"unknown reduction {reduction!r}")
    total = None
    for w in weights:
        term = ag.abs_(ag.abs_(w) - 1.0).sum()
        if reduction == "layer_sum":
            term = term * np.float32(1.0 / w.size)
        total = term if total is None else total + term
    return total if reduction == "layer_sum" else total * np.float32(1.0 / n)


def total_loss(logits: Tensor, labels, teacher_logits, weights, epoch: int, config: TrainConfig):
    """Weighted sum of classification, distillation and latent-weight terms.

    Returns the scalar loss and a dict of the individual (detached) terms.
    """
    w_cls, w_dis, w_re = config.loss_weights(epoch, has_teacher=teacher_logits is not None)
    l_cls = cross_entropy(logits, labels)
    loss = l_cls * np.float32(w_cls)
    parts = {"cls": l_cls.item(), "weights": [w_cls, w_dis, w_re]}
    if w_dis > 0:
        l_dis = distillation_loss(logits, teacher_logits)
        loss = loss + l_dis * np.float32(w_dis)
        parts["dis"] = l_dis.item()
    if w_re > 0:
        l_re = regularization_loss(weights, config.rl_reduction)
        loss = loss + l_re * np.float32(w_re)
        parts["re"] = l_re.item()
    return loss, parts


# -- Adam ------------------------------------------------------------------------
def adam_factor(t: int, beta1: float = 0.9, beta2: float = 0.999) -> float:
    """``sqrt(sum_{i<=t} beta2^i) / sum_{i<=t} beta1^i`` via the geometric-sum closed form."""
    if t < 1:
        raise DomainError(f"t must be >= 1, got {t}")
    s1 = beta1 * (1 - beta1**t) / (1 - beta1)
    s2 = beta2 * (1 - beta2**t) / (1 - beta2)
    return math.sqrt(s2) / s1


def adam_factor_limit(beta1: float = 0.9, beta2: float = 0.999) -> float:
    return math.sqrt(beta2 / (1 - beta2)) * (1 - beta1) / beta1


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """One bias-corrected AdamW update, in place on ``param``, ``m`` and ``v``.

    ``t`` is the 1-based step count after this update.
    """
    if weight_decay:
        param -= lr * weight_decay * param
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, no_decay: Callable[[str], bool] | None = None):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = no_decay or (lambda name: False)
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            wd = 0.0 if self.no_decay(name) else self.weight_decay
            adam_step(p.data, p.grad, self.m[name], self.v[name], self.t, lr,
                      self.beta1, self.beta2, self.eps, wd)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for key in ("m", "v"):
            target = getattr(self, key)
            for name, arr in state[key].items():
                if name not in target:
                    raise ShapeError(f"optimizer state for unknown parameter {name}")
                if arr.shape != target[name].shape:
                    raise ShapeError(f"optimizer state {name}: {arr.shape} vs {target[name].shape}")
                target[name] = np.array(arr, dtype=np.float32)


def make_optimizer(model: BHViT, config: TrainConfig) -> AdamW:
    def no_decay(name: str) -> bool:
        # decay conv/linear weights (binary or real); skip bn, quantizer and RPReLU params
        parts = name.split(".")
        owner = parts[-2] if len(parts) > 1 else ""
        return parts[-1] != "weight" or owner.startswith("norm")

    return AdamW(model.named_parameters(), config.lr, config.betas, config.eps, config.weight_decay, no_decay)


def clamp_quantizer_scales(model: BHViT, floor: float = A_MIN):
    for p in model.quantizer_scales():
        np.maximum(p.data, floor, out=p.data)


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


# -- flips -------------------------------------------------------------------------
@dataclass
class FlipStats:
    epoch: int
    per_layer: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())


def sign_snapshot(model: BHViT) -> dict[str, np.ndarray]:
    return {name: w.data >= 0 for name, w in model.binary_weights()}


def track_flips(model: BHViT, snapshot: dict[str, np.ndarray], epoch: int = 0) -> FlipStats:
    """Count sign changes since ``snapshot`` per layer, then refresh ``snapshot`` in place."""
    stats = FlipStats(epoch)
    for name, w in model.binary_weights():
        now = w.data >= 0
        prev = snapshot.get(name)
        if prev is not None:
            if prev.shape != now.shape:
                raise ShapeError(f"snapshot for {name} has shape {prev.shape}, weight {now.shape}")
            stats.per_layer[name] = int(np.count_nonzero(prev != now))
        snapshot[name] = now
    return stats


def rl_distance(model: BHViT) -> float:
    """Mean ``| |w| - 1 |`` over latent binary weights."""
    ws = [w.data for _, w in model.binary_weights()]
    n = sum(w.size for w in ws)
    return float(sum(np.abs(np.abs(w) - 1).sum() for w in ws) / max(n, 1))


# -- loop --------------------------------------------------------------------------
def evaluate(model: BHViT, ds: Dataset, batch_size: int = 128) -> dict:
    was_training = model.training
    model.eval()
    correct = 0
    loss_sum = 0.0
    size = model.config.input_size
    with ag.no_grad():
        for x, y, _ in iterate_batches(ds, batch_size, size):
            logits = model(x)
            loss_sum += cross_entropy(logits, y).item() * len(y)
            correct += int(np.count_nonzero(logits.data.argmax(axis=-1) == y))
    model.train(was_training)
    n = max(len(ds), 1)
    return {"accuracy": correct / n, "loss": loss_sum / n}


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


@dataclass
class TrainResult:
    history: list[dict]
    optimizer: AdamW
    checkpoint: Path | None = None


def train(model: BHViT, train_ds: Dataset, config: TrainConfig, eval_ds: Dataset | None = None,
          teacher_logits: np.ndarray | None = None, out_dir=None, optimizer: AdamW | None = None,
          start_epoch: int = 0, on_record: Callable[[dict], None] | None = None,
          max_steps: int | None = None, end_epoch: int | None = None) -> TrainResult:
    """Train epochs ``start_epoch .. end_epoch - 1`` (0-based) of a ``config.epochs`` schedule.

    ``end_epoch`` defaults to ``config.epochs``; stopping earlier keeps the
    learning-rate and RL schedules of the full run. Each epoch's shuffling and
    augmentation come from ``(seed, epoch)``, so a run resumed at an epoch
    boundary replays exactly what an uninterrupted run would have done.
    """
    from .checkpoint import save_checkpoint

    if teacher_logits is not None:
        if int(train_ds.indices.max()) >= len(teacher_logits):
            raise ShapeError(f"teacher logits cover {len(teacher_logits)} samples; dataset index "
                             f"{int(train_ds.indices.max())} is out of range")
    opt = optimizer or make_optimizer(model, config)
    steps_per_epoch = math.ceil(len(train_ds) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    snapshot = sign_snapshot(model)
    out_dir = Path(out_dir) if out_dir else None
    metrics_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a")
    history: list[dict] = []
    ckpt = None
    try:
        stop = config.epochs if end_epoch is None else min(end_epoch, config.epochs)
        for epoch in range(start_epoch, stop):
            model.train()
            started = time.perf_counter()
            rng = epoch_rng(config.seed, epoch)
            losses = []
            lr = config.lr
            for step, (x, y, idx) in enumerate(
                iterate_batches(train_ds, config.batch_size, model.config.input_size, rng,
                                shuffle=True, augment_images=config.augment, prefetch=config.prefetch)
            ):
                lr = cosine_lr(config.lr, epoch * steps_per_epoch + step, total_steps)
                teacher = teacher_logits[idx] if teacher_logits is not None else None
                logits = model(x)
                loss, parts = total_loss(logits, y, teacher, [w for _, w in model.binary_weights()],
                                         epoch, config)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch} step {step}; "
                                           f"terms {parts}")
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                clamp_quantizer_scales(model)
                losses.append(value)
                if max_steps is not None and step + 1 >= max_steps:
                    break
            flips = track_flips(model, snapshot, epoch)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "lr": lr,
                "loss_weights": list(config.loss_weights(epoch, teacher_logits is not None)),
                "flips": flips.per_layer,
                "flips_total": flips.total,
                "rl_distance": rl_distance(model),
                "seconds": round(time.perf_counter() - started, 3),
            }
            if eval_ds is not None:
                ev = evaluate(model, eval_ds)
                record["eval_accuracy"] = ev["accuracy"]
                record["eval_loss"] = ev["loss"]
            history.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if on_record:
                on_record(record)
            if out_dir:
                ckpt = out_dir / "last.bhvt"
                save_checkpoint(ckpt, model, opt, epoch=epoch + 1, train_config=config)
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainResult(history, opt, ckpt)
