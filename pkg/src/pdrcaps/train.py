"""Adam training with per-epoch exponential LR decay, hard-training rounds and early stopping."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .capsules import HARD_TRAINING_ROUNDS, MarginLossConfig, capsule_lengths, margin_loss, reconstruction_loss
from .config import parse_bool
from .data import augment, train_val_split
from .errors import ConfigError, DataError, DivergenceError
from .metrics import classification_report

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "round", "round_epoch", "lr", "m_plus", "m_minus", "train_loss", "train_margin",
                  "train_recon", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    gamma: float = 0.96
    batch_size: int = 128
    max_epochs: int = 100
    early_stop_patience: int = 10
    hard_rounds: tuple = HARD_TRAINING_ROUNDS
    seed: int = 0
    val_fraction: float = 0.1
    augment: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "hard_rounds", tuple(self.hard_rounds))
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs must be >= 0 and early_stop_patience >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not self.hard_rounds:
            raise ConfigError("at least one hard-training round is required")

    @classmethod
    def from_mapping(cls, values):
        """Build from string-valued ``[train]`` section entries."""
        kw = {}
        casts = {"lr": float, "gamma": float, "batch_size": int, "max_epochs": int,
                 "early_stop_patience": int, "seed": int, "val_fraction": float,
                 "eval_batch_size": int}
        recon = None
        for key, value in values.items():
            try:
                if key in casts:
                    kw[key] = casts[key](value)
                elif key == "augment":
                    kw[key] = parse_bool(value, key)
                elif key == "hard_rounds":
                    kw[key] = parse_rounds(value)
                elif key == "reconstruction_weight":
                    recon = float(value)
                else:
                    raise ConfigError(f"unknown [train] key {key!r}")
            except ValueError as exc:
                raise ConfigError(f"[train] {key}: {exc}") from None
        if recon is not None:
            rounds = kw.get("hard_rounds", HARD_TRAINING_ROUNDS)
            kw["hard_rounds"] = tuple(MarginLossConfig(r.m_plus, r.m_minus, r.lambda_down, recon)
                                      for r in rounds)
        return cls(**kw)

    def to_mapping(self):
        return {
            "lr": repr(self.lr), "gamma": repr(self.gamma), "batch_size": str(self.batch_size),
            "max_epochs": str(self.max_epochs), "early_stop_patience": str(self.early_stop_patience),
            "hard_rounds": format_rounds(self.hard_rounds), "seed": str(self.seed),
            "val_fraction": repr(self.val_fraction), "augment": str(self.augment).lower(),
            "eval_batch_size": str(self.eval_batch_size),
        }


def parse_rounds(text):
    """``"0.9/0.1/0.5/0.0005, 0.95/0.05/0.5/0.0005"`` -> tuple of MarginLossConfig."""
    rounds = []
    for part in text.split(","):
        fields = [float(v) for v in part.strip().split("/")]
        if not 2 <= len(fields) <= 4:
            raise ConfigError(f"hard round {part!r}: expected m_plus/m_minus[/lambda[/recon_weight]]")
        rounds.append(MarginLossConfig(*fields))
    return tuple(rounds)


def format_rounds(rounds):
    return ", ".join(f"{r.m_plus!r}/{r.m_minus!r}/{r.lambda_down!r}/{r.reconstruction_weight!r}"
                     for r in rounds)


def lr_schedule(epoch, lr0, gamma):
    """``lr0 * gamma ** epoch``."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return lr0 * gamma ** epoch


class Adam:
    """Adam with bias correction over a list of ``(name, Parameter)`` pairs."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.t = 0

    def step(self, lr):
        for name, p in self.named_params:
            if not np.all(np.isfinite(p.grad)):
                bad = int((~np.isfinite(p.grad)).sum())
                raise DivergenceError(f"non-finite gradient in {name} ({bad} of {p.grad.size} entries)")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            m, v, g = self.m[name], self.v[name], p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self, prefix="train/adam"):
        out = {f"{prefix}/t": np.array([float(self.t)])}
        for name in self.m:
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors, prefix="train/adam"):
        self.t = int(tensors[f"{prefix}/t"][0])
        for name in self.m:
            self.m[name][...] = tensors[f"{prefix}/m/{name}"]
            self.v[name][...] = tensors[f"{prefix}/v/{name}"]


# --------------------------------------------------------------------------- training


@dataclass
class TrainState:
    """Everything needed to continue an interrupted run bit-for-bit."""

    round: int = 0
    round_epoch: int = 0
    epoch: int = 0
    best_score: tuple = (-np.inf, -np.inf)
    best_params: dict = None
    wait: int = 0
    adam: Adam = None
    history: list = field(default_factory=list)
    done: bool = False

    def to_tensors(self):
        out = {
            "train/counters": np.array([self.round, self.round_epoch, self.epoch, self.wait, float(self.done)],
                                       dtype=np.float64),
            "train/best_score": np.array(self.best_score, dtype=np.float64),
            "train/history": history_array(self.history),
        }
        if self.adam is not None:
            out.update(self.adam.state_tensors())
        for name, arr in (self.best_params or {}).items():
            out[f"train/best/{name}"] = arr
        return out

    @classmethod
    def from_tensors(cls, tensors, model):
        c = tensors["train/counters"]
        state = cls(round=int(c[0]), round_epoch=int(c[1]), epoch=int(c[2]), wait=int(c[3]), done=bool(c[4]))
        state.best_score = tuple(float(v) for v in tensors["train/best_score"])
        state.history = history_rows(tensors["train/history"])
        best = {k[len("train/best/"):]: v.copy() for k, v in tensors.items() if k.startswith("train/best/")}
        state.best_params = best or None
        if "train/adam/t" in tensors:
            state.adam = Adam(model.named_parameters())
            state.adam.load_state_tensors(tensors)
        return state


def history_array(history):
    if not history:
        return np.zeros((0, len(HISTORY_FIELDS)))
    return np.array([[row[k] for k in HISTORY_FIELDS] for row in history], dtype=np.float64)


def history_rows(arr):
    rows = []
    for r in np.asarray(arr).reshape(-1, len(HISTORY_FIELDS)):
        row = dict(zip(HISTORY_FIELDS, (float(v) for v in r)))
        for k in ("epoch", "round", "round_epoch"):
            row[k] = int(row[k])
        rows.append(row)
    return rows


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row[k] if isinstance(row[k], int) else repr(float(row[k])) for k in HISTORY_FIELDS])
    return buf.getvalue()


def _snapshot(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


def batch_loss(model, x, y, loss_cfg):
    """Loss pieces and predictions without touching gradients (eval mode)."""
    caps, _ = model.forward(x)
    margin, _ = margin_loss(caps, y, loss_cfg)
    recon = 0.0
    if model.decoder is not None and loss_cfg.reconstruction_weight > 0:
        out, _ = model.decoder.forward(caps, y)
        recon, _ = reconstruction_loss(x, out, loss_cfg.reconstruction_weight)
    return margin, recon, capsule_lengths(caps).argmax(axis=1)


def _evaluate_loss(model, dataset, loss_cfg, batch_size):
    n = len(dataset)
    tot_margin = tot_recon = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        margin, recon, pred = batch_loss(model, x, y, loss_cfg)
        tot_margin += margin * len(y)
        tot_recon += recon * len(y)
        correct += int((pred == y).sum())
    return (tot_margin + tot_recon) / n, correct / n


@dataclass
class TrainResult:
    model: object
    history: list
    state: TrainState
    train_set: object = None
    val_set: object = None


def train(model, dataset, cfg=TrainConfig(), val=None, state=None, epoch_budget=None, on_epoch=None):
    """Run every hard-training round on ``dataset``.

    ``val`` defaults to a seeded ``cfg.val_fraction`` hold-out of ``dataset``
    (the training set when that hold-out would be empty).  Each round trains
    up to ``cfg.max_epochs`` epochs, stops after ``cfg.early_stop_patience``
    epochs without validation improvement and ends on its best checkpoint.
    Improvement means higher accuracy, or equal accuracy with lower loss.

    ``state`` resumes an interrupted run; ``epoch_budget`` stops after that
    many epochs (state is returned unfinished).
    """
    if len(dataset) == 0:
        raise DataError("training set is empty")
    if val is None:
        train_set, val_set = train_val_split(dataset, cfg.val_fraction, cfg.seed)
        if len(val_set) == 0:
            val_set = train_set
    else:
        train_set, val_set = dataset, val
    state = state if state is not None else TrainState()
    if cfg.max_epochs == 0:
        state.done = True
        return TrainResult(model, state.history, state, train_set, val_set)

    n = len(train_set)
    ran = 0
    while state.round < len(cfg.hard_rounds) and not state.done:
        loss_cfg = cfg.hard_rounds[state.round]
        if state.adam is None:
            state.adam = Adam(model.named_parameters())
            state.best_score = (-np.inf, -np.inf)
            state.best_params = _snapshot(model)
            state.wait = 0
        stop_round = False
        while state.round_epoch < cfg.max_epochs:
            if epoch_budget is not None and ran >= epoch_budget:
                return TrainResult(model, state.history, state, train_set, val_set)
            lr = lr_schedule(state.round_epoch, cfg.lr, cfg.gamma)
            rng = np.random.default_rng([cfg.seed, state.round, state.round_epoch])
            order = rng.permutation(n)
            last_good = _snapshot(model)
            sums = np.zeros(3)
            correct = 0
            for start in range(0, n, cfg.batch_size):
                idx = np.sort(order[start:start + cfg.batch_size])
                x = train_set.images[idx]
                y = train_set.labels[idx]
                if cfg.augment:
                    x = augment(x, rng)
                model.zero_grad()
                total, margin, recon, caps = model.loss_and_grad(x, y, loss_cfg)
                if not np.isfinite(total):
                    model.load_state_dict(last_good)
                    raise DivergenceError(f"loss became {total} in round {state.round + 1}, "
                                          f"epoch {state.round_epoch}")
                try:
                    state.adam.step(lr)
                except DivergenceError:
                    model.load_state_dict(last_good)
                    raise
                sums += np.array([total, margin, recon]) * len(y)
                correct += int((capsule_lengths(caps).argmax(axis=1) == y).sum())
            val_loss, val_acc = _evaluate_loss(model, val_set, loss_cfg, cfg.eval_batch_size)
            row = {"epoch": state.epoch, "round": state.round + 1, "round_epoch": state.round_epoch, "lr": lr,
                   "m_plus": loss_cfg.m_plus, "m_minus": loss_cfg.m_minus,
                   "train_loss": sums[0] / n, "train_margin": sums[1] / n, "train_recon": sums[2] / n,
                   "train_acc": correct / n, "val_loss": val_loss, "val_acc": val_acc}
            state.history.append(row)
            log.info("round %d epoch %d lr %.3g loss %.4f acc %.4f val_acc %.4f", state.round + 1,
                     state.round_epoch, lr, row["train_loss"], row["train_acc"], val_acc)
            score = (val_acc, -val_loss)
            if score > state.best_score:
                state.best_score = score
                state.best_params = _snapshot(model)
                state.wait = 0
            else:
                state.wait += 1
            state.epoch += 1
            state.round_epoch += 1
            ran += 1
            if on_epoch is not None:
                on_epoch(row)
            if state.wait >= cfg.early_stop_patience:
                stop_round = True
                break
        log.info("round %d finished after %d epochs%s", state.round + 1, state.round_epoch,
                 " (early stop)" if stop_round else "")
        model.load_state_dict(state.best_params)
        state.round += 1
        state.round_epoch = 0
        state.adam = None
        state.best_params = None
    state.done = True
    return TrainResult(model, state.history, state, train_set, val_set)


def evaluate(model, dataset, batch_size=256):
    """Accuracy, confusion matrix and per-class / macro precision-recall-F1."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    preds = model.predict(dataset.images, batch_size)
    return classification_report(preds, dataset.labels, model.cfg.n_classes)


def repeat_summary(values):
    """Mean and sample standard deviation of repeated-run metrics."""
    values = np.asarray(values, dtype=np.float64)
    spread = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), spread
