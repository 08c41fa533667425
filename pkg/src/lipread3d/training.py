"""Model wiring, the Adam optimiser and the supervised training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from .dataio import AugmentSpec, ClipSet, apply_augment, draw_augment
from .errors import ContractError, DivergenceError, ShapeError
from .layers import Module
from .tensor import Rng, Tape, Tensor, backward, no_grad

log = logging.getLogger(__name__)

INPUT_KINDS = ("gray", "flow")


class LipreadModel(Module):
    """Inputs -> front-end -> back-end -> logits; softmax is applied by the loss."""

    def __init__(self, frontend: Module, backend: Module, inputs: Sequence[str]) -> None:
        super().__init__()
        self.frontend = frontend
        self.backend = backend
        self.inputs = tuple(inputs)
        if not self.inputs or any(k not in INPUT_KINDS for k in self.inputs):
            raise ContractError(f"inputs must be drawn from {INPUT_KINDS}, got {self.inputs}")

    def features(self, gray: Optional[Tensor] = None, flow: Optional[Tensor] = None) -> Tensor:
        if self.inputs == ("gray", "flow"):
            if gray is None or flow is None:
                raise ShapeError("two-stream model needs both grayscale and flow inputs")
            return self.frontend(gray, flow)
        x = gray if self.inputs == ("gray",) else flow
        if x is None:
            raise ShapeError(f"model expects {self.inputs[0]} input")
        return self.frontend(x)

    def forward(self, gray: Optional[Tensor] = None, flow: Optional[Tensor] = None) -> Tensor:
        return self.backend(self.features(gray, flow))


def batch_tensors(data: ClipSet, idx, draws=None, dtype=np.float32) -> dict:
    """Tensors for one batch: gray [B,1,T,H,W] and, when present, flow [B,2,T,H,W]."""
    gray = data.gray[idx]
    flow = data.flow[idx] if data.flow is not None else None
    if draws is not None:
        g_out, f_out = [], []
        for i, d in enumerate(draws):
            g, f = apply_augment(gray[i], None if flow is None else flow[i], d)
            g_out.append(g)
            f_out.append(f)
        gray = np.stack(g_out)
        flow = None if flow is None else np.stack(f_out)
    out = {"gray": Tensor(gray[:, None].astype(dtype, copy=False))}
    if flow is not None:
        out["flow"] = Tensor(flow.astype(dtype, copy=False))
    return out


def model_inputs(model: LipreadModel, batch: dict) -> dict:
    return {k: batch[k] for k in model.inputs}


class Adam:
    """Adaptive-moment gradient descent; moments kept in 64-bit."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0) -> None:
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class FitOptions:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    augment: Optional[AugmentSpec] = None
    stop_at_train_acc: Optional[float] = None  # stop once eval-mode train top-1 reaches this
    patience: Optional[int] = None  # epochs without val improvement before stopping
    time_budget: Optional[float] = None  # seconds


@dataclass
class Metrics:
    top1: float
    loss: float
    per_class: dict[int, float] = field(default_factory=dict)
    predictions: Optional[np.ndarray] = None


@dataclass
class FitResult:
    loss_curve: list[float] = field(default_factory=list)  # mean training loss per epoch
    step_losses: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = -1.0
    best_state: Optional[dict] = None
    seconds: float = 0.0

    def epochs_to(self, target: float) -> Optional[int]:
        """1-based epoch at which eval-mode train accuracy first reached ``target``."""
        for i, a in enumerate(self.train_acc):
            if a >= target:
                return i + 1
        return None


def evaluate(model: LipreadModel, data: ClipSet, batch_size: int = 32) -> Metrics:
    """Eval-mode batch norm, no augmentation, no tape."""
    was_training = model.training
    model.eval()
    preds, losses = [], []
    try:
        with no_grad():
            for start in range(0, len(data), batch_size):
                idx = np.arange(start, min(len(data), start + batch_size))
                logits = model(**model_inputs(model, batch_tensors(data, idx)))
                if logits.shape[1] < data.classes:
                    raise ContractError(f"model vocabulary {logits.shape[1]} < dataset classes {data.classes}")
                loss, probs = F.softmax_cross_entropy(logits, data.labels[idx])
                losses.append(float(loss.data) * len(idx))
                preds.append(probs.argmax(axis=1))
    finally:
        model.train(was_training)
    pred = np.concatenate(preds)
    correct = pred == data.labels
    per_class = {int(c): float(correct[data.labels == c].mean()) for c in np.unique(data.labels)}
    return Metrics(float(correct.mean()), sum(losses) / len(data), per_class, pred)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = Rng(seed).spawn(1000 + epoch).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train_step(model: LipreadModel, opt: Adam, batch: dict, labels) -> tuple[float, np.ndarray]:
    opt.zero_grad()
    with Tape() as tape:
        logits = model(**model_inputs(model, batch))
        loss, probs = F.softmax_cross_entropy(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value}")
    backward(tape, loss)
    opt.step()
    return value, probs


def fit(model: LipreadModel, train: ClipSet, val: Optional[ClipSet], opts: FitOptions,
        on_epoch: Optional[Callable[[int, FitResult], None]] = None) -> FitResult:
    """Train with Adam; the best-validation weights are kept in ``result.best_state``.

    Without a validation set the final weights count as best.
    """
    opt = Adam(model.parameters(), opts.lr, opts.betas, weight_decay=opts.weight_decay)
    result = FitResult()
    aug_rng = Rng(opts.seed).spawn(77)
    start = time.time()
    stale = 0
    for epoch in range(opts.epochs):
        model.train()
        total, count = 0.0, 0
        for step, idx in enumerate(batch_order(len(train), opts.batch_size, opts.seed, epoch)):
            draws = [draw_augment(opts.augment, aug_rng) for _ in idx] if opts.augment else None
            batch = batch_tensors(train, idx, draws)
            try:
                value, _ = train_step(model, opt, batch, train.labels[idx])
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch + 1} step {step + 1}: {exc}") from None
            result.step_losses.append(value)
            total += value * len(idx)
            count += len(idx)
        bad = [k for k, v in model.state_dict().items() if not np.isfinite(v).all()]
        if bad:
            raise DivergenceError(f"epoch {epoch + 1}: non-finite values in {bad[0]}")
        result.loss_curve.append(total / count)
        result.train_acc.append(evaluate(model, train, max(opts.batch_size, 32)).top1)
        if val is not None:
            acc = evaluate(model, val, max(opts.batch_size, 32)).top1
            result.val_acc.append(acc)
            improved = acc > result.best_val
        else:
            acc, improved = result.train_acc[-1], True
        if improved:
            result.best_val, result.best_epoch = acc, epoch + 1
            result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
        log.info("epoch %d loss %.4f train %.3f val %s", epoch + 1, result.loss_curve[-1], result.train_acc[-1],
                 f"{acc:.3f}" if val is not None else "-")
        if on_epoch is not None:
            on_epoch(epoch + 1, result)
        if opts.stop_at_train_acc is not None and result.train_acc[-1] >= opts.stop_at_train_acc:
            break
        if opts.patience is not None and stale >= opts.patience:
            break
        if opts.time_budget is not None and time.time() - start > opts.time_budget:
            log.warning("time budget exhausted after %d epochs", epoch + 1)
            break
    result.seconds = time.time() - start
    return result
