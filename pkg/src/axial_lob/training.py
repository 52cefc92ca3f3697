"""Optimization loop: momentum SGD under a single cosine decay.

The schedule multiplier is computed per optimizer step against the total
step budget fixed up front (epochs x steps-per-epoch); early stopping
does not re-normalize it.  Gate parameters stay frozen (trainable=False)
until the configured unfreeze epoch, so their momentum buffers remain
zero during the freeze window.
"""

import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .errors import ConfigError, DivergenceError, GraphError
from .model import save_checkpoint
from .tensor import Tensor, backward, cross_entropy, no_grad


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    base_lr: float = 0.01
    momentum: float = 0.9
    gate_unfreeze_epoch: int = 5
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.gate_unfreeze_epoch > self.epochs:
            raise ConfigError(
                f"gate_unfreeze_epoch={self.gate_unfreeze_epoch} exceeds epochs={self.epochs}"
            )

    def to_pairs(self, prefix="train."):
        from .configio import fmt_float

        return {
            prefix + "batch_size": str(self.batch_size),
            prefix + "epochs": str(self.epochs),
            prefix + "base_lr": fmt_float(self.base_lr),
            prefix + "momentum": fmt_float(self.momentum),
            prefix + "gate_unfreeze_epoch": str(self.gate_unfreeze_epoch),
            prefix + "early_stop_patience": str(self.early_stop_patience),
            prefix + "seed": str(self.seed),
        }

    @classmethod
    def from_pairs(cls, pairs, prefix="train."):
        from . import configio

        kwargs = {}
        for name, kind in (
            ("batch_size", int), ("epochs", int), ("base_lr", float),
            ("momentum", float), ("gate_unfreeze_epoch", int),
            ("early_stop_patience", int), ("seed", int),
        ):
            key = prefix + name
            if key in pairs:
                kwargs[name] = configio.get_typed(pairs, key, kind)
        return cls(**kwargs)


@dataclass
class TrainState:
    epoch: int = 0
    t_cur: int = 0
    t_total: int = 0
    velocities: dict = field(default_factory=dict)
    best_val_loss: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    stopped_early: bool = False
    lr_trace: list = field(default_factory=list)
    history: list = field(default_factory=list)  # per-epoch dicts


def cosine_lr_multiplier(t_cur, t_total):
    """0.5 * (1 + cos(pi * t_cur / t_total)), clamped past the end."""
    if t_total <= 0:
        raise ConfigError(f"t_total must be positive, got {t_total}")
    if t_cur < 0:
        raise ConfigError(f"t_cur must be non-negative, got {t_cur}")
    if t_cur > t_total:
        warnings.warn(
            f"t_cur={t_cur} exceeds t_total={t_total}; clamping multiplier to 0",
            stacklevel=2,
        )
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * t_cur / t_total))


def sgd_momentum_step(params, lr, momentum, velocities):
    """buffer <- mu*buffer + grad; param <- param - lr*buffer.

    Parameters with trainable=False are untouched, including their
    buffers.  A trainable parameter without a gradient is a contract
    violation (backward was not run).
    """
    for p in params:
        if not p.trainable:
            continue
        if p.grad is None:
            raise GraphError(f"parameter {p.name!r} has no gradient; run backward first")
        buf = velocities.get(p.name)
        if buf is None:
            buf = np.zeros_like(p.tensor.data)
            velocities[p.name] = buf
        buf *= momentum
        buf += p.grad
        p.tensor.data -= lr * buf


def _eval_pass(model, windows, labels, batch_size=256):
    """Mean loss and predictions over a window set in eval mode."""
    n = len(labels)
    losses = []
    preds = np.empty(n, dtype=np.int64)
    with no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            x = Tensor(windows[lo:hi][:, None, :, :], dtype=model.dtype)
            logits = model.forward(x, train=False)
            losses.append(cross_entropy(logits, labels[lo:hi]).item() * (hi - lo))
            preds[lo:hi] = np.argmax(logits.data, axis=1)
    return sum(losses) / n, preds


def train(model, train_data, val_data, config, out_dir=None, log_path=None):
    """Run the training schedule; returns the final TrainState.

    train_data/val_data expose .windows [n, 40, 40] and .labels [n].
    Per-epoch lines `epoch, step, lr, train_loss, val_loss, val_f1_macro`
    go to log_path when given; the best-validation checkpoint goes to
    out_dir/best.ckpt and the initial weights to out_dir/init.ckpt.
    """
    n_train = len(train_data.labels)
    n_val = len(val_data.labels)
    if n_train == 0 or n_val == 0:
        raise ConfigError("train and validation sets must be non-empty")
    cfg = config
    steps_per_epoch = (n_train + cfg.batch_size - 1) // cfg.batch_size
    state = TrainState(t_total=cfg.epochs * steps_per_epoch)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    log_lines = []

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(model, os.path.join(out_dir, "init.ckpt"))

    def flush_log():
        if log_path is not None:
            with open(log_path, "w", encoding="utf-8") as fh:
                fh.write("epoch, step, lr, train_loss, val_loss, val_f1_macro\n")
                fh.writelines(line + "\n" for line in log_lines)

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        model.set_gates_trainable(epoch >= cfg.gate_unfreeze_epoch)
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        lr = cfg.base_lr
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x = Tensor(train_data.windows[idx][:, None, :, :], dtype=model.dtype)
            logits = model.forward(x, train=True)
            loss = cross_entropy(logits, train_data.labels[idx])
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                _write_divergence_snapshot(out_dir, state, epoch, lr, log_lines)
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, step {state.t_cur}"
                )
            lr = cfg.base_lr * cosine_lr_multiplier(state.t_cur, state.t_total)
            model.zero_grad()
            backward(loss)
            sgd_momentum_step(params, lr, cfg.momentum, state.velocities)
            state.lr_trace.append(lr)
            state.t_cur += 1
            epoch_loss += loss_val * len(idx)
        train_loss = epoch_loss / n_train

        val_loss, val_preds = _eval_pass(model, val_data.windows, val_data.labels)
        val_f1 = evaluation.compute_metrics(val_preds, val_data.labels).macro_f1
        state.history.append(
            {"epoch": epoch, "step": state.t_cur, "lr": lr,
             "train_loss": train_loss, "val_loss": val_loss, "val_f1_macro": val_f1}
        )
        log_lines.append(
            f"{epoch}, {state.t_cur}, {lr:.10g}, {train_loss:.10g}, "
            f"{val_loss:.10g}, {val_f1:.10g}"
        )

        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            state.epochs_since_improvement = 0
            if out_dir is not None:
                save_checkpoint(
                    model, os.path.join(out_dir, "best.ckpt"),
                    extra_meta={"train.best_epoch": epoch,
                                "train.best_val_loss": f"{val_loss:.10g}"},
                )
        else:
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement >= cfg.early_stop_patience:
                state.stopped_early = True
                flush_log()
                return state
    flush_log()
    return state


def _write_divergence_snapshot(out_dir, state, epoch, lr, log_lines):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "divergence.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"epoch = {epoch}\nstep = {state.t_cur}\nlr = {lr}\n")
        fh.write("recent_epochs:\n")
        for line in log_lines[-5:]:
            fh.write("  " + line + "\n")
