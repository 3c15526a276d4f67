"""Training loop, Adam, plateau LR schedule and SSP -> MFM transfer."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .labels import PT, LabelMap, collapse_to_three, to_onehot
from .losses import ClassWeights, LossSpec, compute_loss
from .metrics import evaluate_many
from .tensor import Tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr0: float = 1e-3
    lr_patience: int = 4
    lr_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    improvement: float = 1e-6

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# --- optimizer ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` (name -> ndarray)."""
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


class PlateauSchedule:
    """lr <- lr * factor once validation loss has not improved for ``patience`` epochs."""

    def __init__(self, lr0, patience=4, factor=0.1, threshold=1e-6):
        self.lr = lr0
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss):
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


# --- data helpers ---------------------------------------------------------------------

@dataclass
class Dataset:
    """Network inputs (N, 3, H, W) and 4-class labels (N, H, W)."""
    x: np.ndarray
    labels: np.ndarray
    images: np.ndarray | None = None

    def __len__(self):
        return len(self.x)


def targets(labels, classes, ov_to=PT):
    """One-hot targets; 3-class mode collapses OV first."""
    if classes == 4:
        return to_onehot(labels, 4)
    collapsed = np.stack([collapse_to_three(LabelMap(l, 4), ov_to).classes for l in labels])
    return to_onehot(collapsed, 3)


def predict(model, x, batch_size=8):
    """Probabilities (N, C, H, W) in inference mode."""
    was_training = model.training
    model.eval()
    out = [model.probs(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return np.concatenate(out)


def labels_from_probs(probs):
    """Hard 4-class labels; 3-class predictions map onto PT/HT/BG unchanged."""
    return np.argmax(probs, axis=1).astype(np.uint8)


def score(model, data, batch_size=8):
    probs = predict(model, data.x, batch_size)
    preds = labels_from_probs(probs)
    return evaluate_many((LabelMap(p, 4), LabelMap(g, 4)) for p, g in zip(preds, data.labels))


# --- training ---------------------------------------------------------------------------

def model_classes(model):
    return model.out_classes if hasattr(model, "out_classes") else model.cfg.out_classes


def _loss_on(model, spec, x, y):
    return compute_loss(spec, model.probs(Tensor(x)), y)


def evaluate_loss(model, spec, data, classes, batch_size=8):
    was_training = model.training
    model.eval()
    total, n = 0.0, 0
    for i in range(0, len(data), batch_size):
        x = data.x[i:i + batch_size]
        y = targets(data.labels[i:i + batch_size], classes)
        total += float(_loss_on(model, spec, x, y).data) * len(x)
        n += len(x)
    model.train(was_training)
    return total / n


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list
    step_losses: list


def train(model, train_set, val_set, cfg, log_path=None, ov_to=PT):
    """Fit ``model`` and return best/last checkpoints plus per-epoch log records.

    3-class models are trained on labels collapsed with ``ov_to``.  Validation
    mean IoU is computed on the model's hard predictions (expanded as 4-class).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be nonempty")
    classes = model_classes(model)
    spec = cfg.loss
    if len(spec.weights) != classes:
        raise ValueError(f"loss weights have {len(spec.weights)} entries for a {classes}-class model")
    rng = np.random.default_rng(cfg.seed)
    sched = PlateauSchedule(cfg.lr0, cfg.lr_patience, cfg.lr_factor, cfg.improvement)
    state = AdamState()
    y_all = targets(train_set.labels, classes, ov_to)
    records, step_losses = [], []
    best = None
    model.train()
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_set))
            running, seen = 0.0, 0
            for s in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[s:s + cfg.batch_size])
                model.zero_grad()
                loss = _loss_on(model, spec, train_set.x[idx], y_all[idx])
                value = float(loss.data)
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}, step {len(step_losses) + 1}")
                loss.backward()
                named = dict(model.named_parameters())
                adam_step({k: p.data for k, p in named.items()},
                          {k: p.grad for k, p in named.items() if p.grad is not None},
                          state, sched.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                step_losses.append(value)
                running += value * len(idx)
                seen += len(idx)
            val_loss = evaluate_loss(model, spec, val_set, classes, cfg.batch_size)
            if not math.isfinite(val_loss):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
            val_iou = score(model, val_set, cfg.batch_size).mean
            rec = {"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss,
                   "val_mean_iou": val_iou, "lr": sched.lr}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            log.info("epoch %d train %.4f val %.4f mIoU %s lr %g", epoch, rec["train_loss"], val_loss, val_iou, sched.lr)
            if best is None or val_loss < best.best_val_loss - cfg.improvement:
                best = make_checkpoint(model, state, epoch, val_loss)
            sched.step(val_loss)
    finally:
        if fh:
            fh.close()
    last = make_checkpoint(model, state, cfg.epochs, best.best_val_loss)
    return TrainResult(best, last, records, step_losses)


def make_checkpoint(model, state, epoch, best_val_loss):
    opt = {f"m/{k}": v.copy() for k, v in state.m.items()}
    opt.update({f"v/{k}": v.copy() for k, v in state.v.items()})
    opt["meta/step"] = np.asarray(state.step, dtype=np.float32)
    return Checkpoint(model.state_dict(), opt, epoch, best_val_loss)


def restore(model, ckpt):
    model.load_state_dict(ckpt.tensors)
    return model


def transfer_init(mfm, ssp_ckpt):
    """Copy a standalone SSP checkpoint into ``mfm.ssp``; other parts keep their init."""
    mfm.ssp.load_state_dict(ssp_ckpt.tensors)
    return mfm


def default_loss(kind, classes, gamma=2.0):
    return LossSpec(kind=kind, gamma=gamma, weights=ClassWeights.paper(classes))
