"""Unsupervised training of SMPO/CSMPO models on background events.

The forward pass is the model's contraction plan run in floating point on
a batch; gradients come from the plan's reverse sweep.  Training is always
in floating point; quantization is an inference-only concern.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .contraction import ContractionPlan, backprop, bind_inputs, execute_batch, plan_model, run_plan
from .errors import ConfigError, NumericError
from .model import TnModel

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-30


@dataclass(frozen=True)
class LossParams:
    mu: float = 50.0
    delta: float = 25.0

    def __post_init__(self):
        if not (self.mu > 0 and self.delta > 0):
            raise ConfigError(f"mu and delta must be positive, got {self}")

    @classmethod
    def default_for(cls, model: TnModel) -> LossParams:
        return cls(50.0, 15.0) if model.is_cascade else cls(50.0, 25.0)


def loss(norm_sq, params: LossParams):
    """Pseudo-Huber around ``mu`` plus a log-squared penalty below 1."""
    n = np.asarray(norm_sq, dtype=np.float64)
    z = (n - params.mu) / params.delta
    huber = params.delta**2 * (np.sqrt(1.0 + z * z) - 1.0)
    collapse = np.where(n < 1.0, np.log(np.maximum(n, LOG_FLOOR) / params.mu) ** 2, 0.0)
    out = huber + collapse
    return float(out) if out.ndim == 0 else out


def loss_derivative(norm_sq, params: LossParams):
    n = np.asarray(norm_sq, dtype=np.float64)
    z = (n - params.mu) / params.delta
    d = (n - params.mu) / np.sqrt(1.0 + z * z)
    active = (n < 1.0) & (n > LOG_FLOOR)
    safe = np.where(active, n, 1.0)
    d = d + np.where(active, 2.0 * np.log(safe / params.mu) / safe, 0.0)
    return float(d) if d.ndim == 0 else d


def batch_loss_and_grad(model: TnModel, sites: np.ndarray, params: LossParams,
                        plan: ContractionPlan | None = None):
    """Mean loss over a batch ``(N, n, p)`` and its gradient per weight tensor."""
    plan = plan or plan_model(model)
    sites = np.asarray(sites, dtype=np.float64)
    regs = bind_inputs(plan, model, sites)
    batched = {k: k.startswith("x") for k in regs}
    norms, tape = run_plan(plan, regs, batched, record=True)
    if not np.all(np.isfinite(norms)):
        for i, step in enumerate(plan.steps):
            if not np.all(np.isfinite(tape.regs[step.out])):
                raise NumericError(f"non-finite value after step {i} ({step.kind} on {step.sites})")
    losses = loss(norms, params)
    seed = loss_derivative(norms, params) / len(sites)
    adj = backprop(plan, tape, seed)
    grads = []
    for layer_idx, layer in enumerate(model.layers, start=1):
        for s, t in enumerate(layer.sites):
            grads.append(np.asarray(adj.get(f"w{layer_idx}.{s}", np.zeros_like(t))))
    return float(np.mean(losses)), grads, norms


def grad(model: TnModel, mps, params: LossParams) -> list[np.ndarray]:
    """Gradient of the single-event loss with respect to every weight tensor."""
    sites = np.asarray(getattr(mps, "sites", mps), dtype=np.float64)
    return batch_loss_and_grad(model, sites[None], params)[1]


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights, **kw) -> AdamState:
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(w) for w in weights], **kw)

    def update(self, weights, grads, lr: float) -> list[np.ndarray]:
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        out = []
        for i, (w, g) in enumerate(zip(weights, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(w - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2048
    learning_rate: float = 4e-3
    max_epochs: int = 200
    patience: int = 50
    min_delta: float = 1e-4
    seed: int = 0
    splits: tuple[float, float, float] = (0.70, 0.05, 0.25)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("max_epochs and patience must be >= 0")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        splits = tuple(float(f) for f in self.splits)
        if len(splits) != 3 or any(f < 0 for f in splits) or sum(splits) > 1 + 1e-9:
            raise ConfigError(f"splits must be three non-negative fractions summing to <= 1, got {splits}")
        object.__setattr__(self, "splits", splits)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "splits" in known:
            known["splits"] = tuple(known["splits"])
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["splits"] = list(self.splits)
        return d


def split_indices(n: int, splits, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = np.random.default_rng(seed).permutation(n)
    n_tr = int(round(splits[0] * n))
    n_va = int(round(splits[1] * n))
    n_te = min(int(round(splits[2] * n)), n - n_tr - n_va)
    return idx[:n_tr], idx[n_tr:n_tr + n_va], idx[n_tr + n_va:n_tr + n_va + n_te]


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    stop_reason: str = "max_epochs"
    diagnostic: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def mean_loss(model: TnModel, sites: np.ndarray, params: LossParams,
              plan: ContractionPlan | None = None, chunk: int = 8192) -> float:
    plan = plan or plan_model(model)
    total = 0.0
    for i in range(0, len(sites), chunk):
        total += float(np.sum(loss(execute_batch(plan, model, sites[i:i + chunk]), params)))
    return total / max(len(sites), 1)


def train(model: TnModel, train_sites: np.ndarray, valid_sites: np.ndarray,
          cfg: TrainConfig = TrainConfig(), loss_params: LossParams | None = None,
          callback=None) -> tuple[TnModel, History]:
    """Minibatch Adam with early stopping on the epoch-mean validation loss.

    Returns the best-validation checkpoint.  The final short batch of each
    epoch is kept.  ``callback(epoch, train_loss, valid_loss)`` is invoked
    after every epoch when given.
    """
    loss_params = loss_params or LossParams.default_for(model)
    train_sites = np.asarray(train_sites, dtype=np.float64)
    valid_sites = np.asarray(valid_sites, dtype=np.float64)
    hist = History()
    if cfg.max_epochs == 0:
        return model, hist
    if len(train_sites) == 0 or len(valid_sites) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    plan = plan_model(model)
    rng = np.random.default_rng(cfg.seed)
    weights = [np.array(w) for w in model.weights()]
    adam = AdamState.zeros_like(weights, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    best, best_loss, wait = model, np.inf, 0
    current = model
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_sites))
        total = 0.0
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = train_sites[order[start:start + cfg.batch_size]]
                value, grads, _ = batch_loss_and_grad(current, batch, loss_params, plan)
                if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                    raise NumericError(f"non-finite loss or gradient in epoch {epoch}")
                total += value * len(batch)
                weights = adam.update(weights, grads, cfg.learning_rate)
                current = current.with_weights(weights)
            valid = mean_loss(current, valid_sites, loss_params, plan)
            if not np.isfinite(valid):
                raise NumericError(f"non-finite validation loss in epoch {epoch}")
        except NumericError as exc:
            log.warning("aborting training: %s", exc)
            hist.stop_reason = "numeric_error"
            hist.diagnostic = str(exc)
            hist.stopped_epoch = epoch
            return best, hist
        hist.train_loss.append(total / len(train_sites))
        hist.valid_loss.append(valid)
        hist.stopped_epoch = epoch
        if callback is not None:
            callback(epoch, hist.train_loss[-1], valid)
        if best_loss - valid > cfg.min_delta:
            best, best_loss, wait = current, valid, 0
            hist.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                hist.stop_reason = "early_stopping"
                break
    return best, hist


@dataclass(frozen=True)
class ScoreCalibration:
    median_bkg: float

    def __post_init__(self):
        if not np.isfinite(self.median_bkg):
            raise NumericError("calibration median is not finite")


def calibrate(norms_bkg) -> ScoreCalibration:
    norms_bkg = np.asarray(norms_bkg, dtype=np.float64)
    if norms_bkg.size == 0:
        raise ConfigError("calibration needs background events")
    return ScoreCalibration(float(np.median(norms_bkg)))


def anomaly_score(norm_sq, cal: ScoreCalibration):
    out = np.abs(np.asarray(norm_sq, dtype=np.float64) - cal.median_bkg)
    return float(out) if out.ndim == 0 else out
