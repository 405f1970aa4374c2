"""Loss, optimizer, learning-rate schedule, early stopping and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import graph
from .graph import ParameterSet
from .imaging import flip_h, flip_v, translate
from .ops import LayerParams, ShapeError

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-7
IMPROVEMENT_DELTA = 1e-6


@dataclass
class TrainConfig:
    """Training hyper-parameters; defaults are the patch-level setup.

    Use :meth:`for_mode` for the image-level defaults (batch 1, 300-epoch
    cap, no patience-based stopping).
    """

    batch_size: int = 32
    lr0: float = 1.0
    decay_factor: float = 0.2
    plateau_patience: int = 5
    lr_floor: float = 1e-5
    early_stop_patience: int | None = 30
    max_epochs: int | None = None
    val_fraction: float = 0.2
    rho: float = 0.95
    eps: float = 1e-6
    augment: bool = True
    max_shift: float = 0.1
    seed: int = 0

    def __post_init__(self):
        positive = ("batch_size", "lr0", "decay_factor", "plateau_patience", "lr_floor", "eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.early_stop_patience is None and self.max_epochs is None:
            raise ValueError("need early_stop_patience or max_epochs to terminate")

    @classmethod
    def for_mode(cls, mode, **overrides):
        if mode == "patch":
            base = cls()
        elif mode == "image":
            base = cls(batch_size=1, early_stop_patience=None, max_epochs=300)
        else:
            raise ValueError(f"unknown training mode {mode!r}")
        return replace(base, **overrides)

    def to_dict(self):
        return asdict(self)


def combined_loss(y, p):
    """Binary cross-entropy (summed over pixels) minus the soft Dice term.

    ``loss = -<y, log p> - <1 - y, log(1 - p)> - 2<y, p> / (<y, 1> + <p, 1>)``

    Rank-4 inputs are treated per sample and the per-sample losses are
    averaged over the batch; anything else is one sample. Returns
    ``(loss, d loss / d p)``.
    """
    y = np.asarray(y)
    p = np.asarray(p)
    if y.shape != p.shape:
        raise ShapeError(f"target shape {y.shape} != prediction shape {p.shape}", dim="shape")
    n = y.shape[0] if y.ndim == 4 else 1
    yf = y.reshape(n, -1).astype(np.float64)
    pf = p.reshape(n, -1).astype(np.float64)

    pc = np.maximum(pf, LOG_CLAMP)
    qc = np.maximum(1 - pf, LOG_CLAMP)
    ce = -(yf * np.log(pc)).sum(axis=1) - ((1 - yf) * np.log(qc)).sum(axis=1)
    g_ce = -yf / pc * (pf > LOG_CLAMP) + (1 - yf) / qc * (1 - pf > LOG_CLAMP)

    inter = (yf * pf).sum(axis=1)
    denom = yf.sum(axis=1) + pf.sum(axis=1)
    empty = denom == 0
    safe = np.where(empty, 1.0, denom)
    dice = np.where(empty, 1.0, 2 * inter / safe)
    g_dice = np.where(empty[:, None], 0.0, 2 * yf / safe[:, None] - (2 * inter / safe**2)[:, None])

    loss = float(np.mean(ce - dice))
    grad = ((g_ce - g_dice) / n).reshape(p.shape)
    return loss, grad.astype(p.dtype if np.issubdtype(p.dtype, np.floating) else np.float64)


class AdaDelta:
    """AdaDelta with a global learning-rate multiplier.

    ``E[g^2] <- rho E[g^2] + (1 - rho) g^2``,
    ``u = sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g``,
    ``x <- x - lr * u`` and ``E[dx^2] <- rho E[dx^2] + (1 - rho) u^2``.
    """

    def __init__(self, rho=0.95, eps=1e-6):
        self.rho = rho
        self.eps = eps
        self.acc_grad = {}
        self.acc_delta = {}

    def _step_array(self, key, x, g, lr):
        if x.shape != g.shape:
            raise ShapeError(f"{key}: gradient shape {g.shape} != parameter shape {x.shape}")
        if key not in self.acc_grad:
            self.acc_grad[key] = np.zeros_like(x)
            self.acc_delta[key] = np.zeros_like(x)
        ag, ad = self.acc_grad[key], self.acc_delta[key]
        rho, eps = self.rho, self.eps
        ag *= rho
        ag += (1 - rho) * g * g
        update = np.sqrt(ad + eps) / np.sqrt(ag + eps) * g
        ad *= rho
        ad += (1 - rho) * update * update
        return x - (lr * update).astype(x.dtype, copy=False)

    def step(self, params, grads, lr=1.0):
        """Return updated parameters; accumulators are updated in place."""
        if isinstance(params, np.ndarray):
            return self._step_array("x", params, np.asarray(grads, dtype=params.dtype), lr)
        if set(params) != set(grads):
            raise ShapeError("gradient keys do not match parameter keys")
        out = ParameterSet(seed=getattr(params, "seed", None))
        for key in sorted(params):
            p, g = params[key], grads[key]
            out[key] = LayerParams(
                self._step_array(key + "/kernels", p.kernels, g.kernels.astype(p.kernels.dtype), lr),
                self._step_array(key + "/biases", p.biases, g.biases.astype(p.biases.dtype), lr),
            )
        return out

    def state_dict(self):
        d = {f"g:{k}": v for k, v in self.acc_grad.items()}
        d.update({f"d:{k}": v for k, v in self.acc_delta.items()})
        return d

    def load_state_dict(self, d):
        self.acc_grad = {k[2:]: np.array(v) for k, v in d.items() if k.startswith("g:")}
        self.acc_delta = {k[2:]: np.array(v) for k, v in d.items() if k.startswith("d:")}


def adadelta_step(params, grads, state, lr=1.0):
    return state.step(params, grads, lr), state


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` stagnant epochs.

    The learning rate never drops below ``floor``; the stagnation counter
    resets on improvement and after every decay.
    """

    def __init__(self, lr, factor=0.2, patience=5, floor=1e-5, min_delta=IMPROVEMENT_DELTA):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.min_delta = min_delta
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss):
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
            return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            if self.lr > self.floor:
                self.lr = max(self.lr * self.factor, self.floor)
            self.wait = 0
        return self.lr


def plateau_scheduler(history, lr, factor=0.2, patience=5, floor=1e-5):
    """Learning rate after replaying ``history`` (validation losses) from ``lr``."""
    sched = PlateauScheduler(lr, factor, patience, floor)
    for v in history:
        sched.step(v)
    return sched.lr


class EarlyStopper:
    """Stop after ``patience`` epochs without a new best, or at ``max_epochs``."""

    def __init__(self, patience=30, max_epochs=None, min_delta=IMPROVEMENT_DELTA):
        self.patience = patience
        self.max_epochs = max_epochs
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def step(self, val_loss):
        """Record one epoch; ``True`` means stop."""
        self.epoch += 1
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = self.epoch
        if self.max_epochs is not None and self.epoch >= self.max_epochs:
            return True
        if self.patience is not None and self.epoch - self.best_epoch >= self.patience:
            return True
        return False


def early_stopper(history, patience=30, max_epochs=None):
    """``"stop"`` or ``"continue"`` after replaying ``history``."""
    stopper = EarlyStopper(patience, max_epochs)
    for v in history:
        if stopper.step(v):
            return "stop"
    return "continue"


def _as_pairs(data):
    X, Y = data
    if isinstance(X, np.ndarray):
        X = [X[i : i + 1] for i in range(X.shape[0])]
        Y = [Y[i : i + 1] for i in range(Y.shape[0])]
    X, Y = list(X), list(Y)
    if len(X) != len(Y):
        raise ValueError("need one mask per image")
    return X, Y


def _augment_pair(x, y, rng, max_shift):
    if rng.random() < 0.5:
        x, y = flip_h(x), flip_h(y)
    if rng.random() < 0.5:
        x, y = flip_v(x), flip_v(y)
    h, w = x.shape[-2:]
    dy = int(rng.integers(-int(max_shift * h), int(max_shift * h) + 1))
    dx = int(rng.integers(-int(max_shift * w), int(max_shift * w) + 1))
    if dy or dx:
        x, y = translate(x, dy, dx), translate(y, dy, dx)
    return x, y


def evaluate_loss(spec, params, data, batch_size=32):
    """Mean per-sample combined loss over ``data``."""
    X, Y = _as_pairs(data)
    if not X:
        raise ValueError("empty split")
    total = 0.0
    for i in range(0, len(X), batch_size):
        xb = np.concatenate(X[i : i + batch_size])
        yb = np.concatenate(Y[i : i + batch_size])
        out = graph.predict(spec, params, xb)
        loss, _ = combined_loss(yb, out)
        total += loss * xb.shape[0]
    return total / len(X)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    steps: int = 0


@dataclass
class History:
    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def val_losses(self):
        return [r.val_loss for r in self.records]

    @property
    def train_losses(self):
        return [r.train_loss for r in self.records]

    def to_list(self):
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows):
        return cls([EpochRecord(**r) for r in rows])


class Trainer:
    """Mini-batch AdaDelta training with plateau decay and early stopping.

    Epoch 0 is an evaluation-only record of the starting parameters. The
    trainer keeps the best-validation parameters and can be checkpointed
    between epochs through :meth:`state_dict`.
    """

    def __init__(self, spec, params, config=None, mode="patch"):
        self.spec = spec
        self.config = config or TrainConfig.for_mode(mode)
        self.mode = mode
        self.params = params.copy()
        self.best_params = params.copy()
        self.optimizer = AdaDelta(self.config.rho, self.config.eps)
        self.scheduler = PlateauScheduler(
            self.config.lr0, self.config.decay_factor, self.config.plateau_patience,
            self.config.lr_floor,
        )
        self.stopper = EarlyStopper(self.config.early_stop_patience, self.config.max_epochs)
        self.history = History()
        self.stopped = False

    @property
    def epoch(self):
        return self.stopper.epoch

    def _eval_batch(self):
        return max(self.config.batch_size, 8) if self.mode == "patch" else 1

    def fit(self, train, val, epochs=None, callback=None):
        """Train until stopping (or for ``epochs`` more epochs); returns best params."""
        cfg = self.config
        Xt, Yt = _as_pairs(train)
        val = _as_pairs(val)
        if not Xt or not val[0]:
            raise ValueError("empty split: both train and validation need samples")
        if not self.history.records:
            v0 = evaluate_loss(self.spec, self.params, val, self._eval_batch())
            t0 = evaluate_loss(self.spec, self.params, (Xt, Yt), self._eval_batch())
            self.scheduler.best = v0
            self.stopper.best = v0
            self.history.append(EpochRecord(0, self.scheduler.lr, t0, v0))
            log.info("epoch 0: train %.6f val %.6f", t0, v0)
        done = 0
        while not self.stopped and (epochs is None or done < epochs):
            epoch = self.epoch + 1
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(Xt))
            lr = self.scheduler.lr
            losses, steps = [], 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                pairs = [(Xt[i], Yt[i]) for i in idx]
                if cfg.augment:
                    pairs = [_augment_pair(x, y, rng, cfg.max_shift) for x, y in pairs]
                xb = np.concatenate([x for x, _ in pairs])
                yb = np.concatenate([y for _, y in pairs])
                out, tape = graph.forward(self.spec, self.params, xb, record=True)
                loss, g = combined_loss(yb, out)
                grads = graph.backward(tape, g)
                self.params = self.optimizer.step(self.params, grads, lr)
                losses.append(loss * len(idx))
                steps += 1
            train_loss = float(np.sum(losses) / len(order))
            val_loss = evaluate_loss(self.spec, self.params, val, self._eval_batch())
            if val_loss < self.stopper.best - IMPROVEMENT_DELTA:
                self.best_params = self.params.copy()
            self.history.append(EpochRecord(epoch, lr, train_loss, val_loss, steps))
            self.scheduler.step(val_loss)
            self.stopped = self.stopper.step(val_loss)
            done += 1
            log.info("epoch %d: lr %.3g train %.6f val %.6f", epoch, lr, train_loss, val_loss)
            if callback is not None:
                callback(self)
        return self.best_params

    def state_dict(self):
        """Flat dict of arrays and scalars sufficient to resume training."""
        d = {f"opt/{k}": v for k, v in self.optimizer.state_dict().items()}
        for prefix, ps in (("params", self.params), ("best", self.best_params)):
            for k, p in ps.items():
                d[f"{prefix}/{k}/kernels"] = p.kernels
                d[f"{prefix}/{k}/biases"] = p.biases
        d["scalars"] = np.array([
            self.scheduler.lr, self.scheduler.best, self.scheduler.wait,
            self.stopper.best, self.stopper.best_epoch, self.stopper.epoch, float(self.stopped),
        ])
        return d

    def load_state_dict(self, d, history):
        self.optimizer.load_state_dict(
            {k[4:]: v for k, v in d.items() if k.startswith("opt/")}
        )
        for prefix, attr in (("params", "params"), ("best", "best_params")):
            ps = ParameterSet(seed=self.params.seed)
            for k in self.spec.conv_ids:
                ps[k] = LayerParams(np.array(d[f"{prefix}/{k}/kernels"]),
                                    np.array(d[f"{prefix}/{k}/biases"]))
            setattr(self, attr, ps)
        lr, sbest, wait, ebest, bepoch, epoch, stopped = np.asarray(d["scalars"]).tolist()
        self.scheduler.lr, self.scheduler.best, self.scheduler.wait = lr, sbest, int(wait)
        self.stopper.best, self.stopper.best_epoch = ebest, int(bepoch)
        self.stopper.epoch = int(epoch)
        self.stopped = bool(stopped)
        self.history = history


def train_epochs(spec, params, train, val, config=None, mode="patch", epochs=None, callback=None):
    """Train and return ``(best_params, history)``."""
    trainer = Trainer(spec, params, config, mode)
    best = trainer.fit(train, val, epochs=epochs, callback=callback)
    return best, trainer.history
