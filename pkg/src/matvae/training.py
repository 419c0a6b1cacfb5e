"""Losses, Adam, and the MSA / DMS / fine-tuning training loops."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from matvae import model as M
from matvae import tensor as T
from matvae.seqdata import DmsDataset, FoldSplit, MsaDataset, one_hot_indices, sample_batch

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when a loss becomes non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 8e-5
    batch_size: int = 256
    steps: int = 300_000
    beta: float = 0.01
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 0
    log_interval: int = 1
    clip_norm: float | None = None
    freeze_encoder: bool = False
    standardize: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("batch_size and log_interval must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


PAPER_MSA = dict(learning_rate=8e-5, batch_size=256, steps=300_000, beta=0.01)
PAPER_DMS = dict(learning_rate=1e-4, batch_size=512, steps=100_000)


@dataclass
class LossTrace:
    """Logged steps; ``second``/``third`` are entropy and reconstruction for
    the VAE, and unused (NaN) for MSE training."""

    kind: str = "vae"
    steps: list[int] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)
    reconstruction: list[float] = field(default_factory=list)

    def append(self, step: int, total: float, ent: float = float("nan"), rec: float = float("nan")) -> None:
        self.steps.append(step)
        self.total.append(total)
        self.entropy.append(ent)
        self.reconstruction.append(rec)

    def __len__(self) -> int:
        return len(self.steps)

    def smoothed(self, window: int) -> np.ndarray:
        """Trailing moving average of the total loss."""
        x = np.asarray(self.total)
        c = np.concatenate([[0.0], np.cumsum(x)])
        idx = np.arange(1, len(x) + 1)
        lo = np.maximum(0, idx - window)
        return (c[idx] - c[lo]) / (idx - lo)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if self.kind == "vae":
                w.writerow(["step", "loss", "entropy", "reconstruction"])
                for row in zip(self.steps, self.total, self.entropy, self.reconstruction):
                    w.writerow([row[0]] + [repr(v) for v in row[1:]])
            else:
                w.writerow(["step", "mse"])
                for s, v in zip(self.steps, self.total):
                    w.writerow([s, repr(v)])


# ---------------------------------------------------------------------------
# losses


def vae_loss_terms(x, h: T.Tensor, x_hat: T.Tensor, beta: float):
    """Batch-mean (total, entropy, reconstruction) tensors.

    total = beta * S(h) + CE(x, x_hat), averaged over the leading batch axis.
    """
    x = np.asarray(x)
    n = x.shape[0] if x.ndim == 3 else 1
    ent = T.scale(T.entropy(h), 1.0 / n)
    rec = T.scale(T.cross_entropy_rows(x_hat, x), 1.0 / n)
    return T.add(T.scale(ent, beta), rec), ent, rec


def vae_loss(x, h, z, x_hat, beta: float) -> T.Tensor:
    """Entropy-regularised negative ELBO with a single latent draw ``z``
    (already used to produce ``x_hat``)."""
    return vae_loss_terms(x, h, x_hat, beta)[0]


def mse_loss(y_hat, y) -> T.Tensor:
    y_hat = T.as_tensor(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("mse_loss: empty batch")
    if y_hat.shape != y.shape:
        raise T.ShapeError(f"mse_loss: shapes {y_hat.shape} and {y.shape} differ")
    r = T.sub(y_hat, y)
    return T.mean(T.mul(r, r))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: M.ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params},
                   {k: np.zeros_like(p.data) for k, p in params})


def adam_step(params: M.ModelParams, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names=None) -> None:
    """In-place bias-corrected Adam update from the ``grad`` of each tensor."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params:
        if names is not None and k not in names:
            continue
        g = p.grad
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _clip(params: M.ModelParams, max_norm: float | None) -> None:
    if max_norm is None:
        return
    total = np.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in params))
    if total > max_norm:
        for _, p in params:
            p.grad *= max_norm / total


# ---------------------------------------------------------------------------
# MSA training


def train_msa(msa: MsaDataset, config: TrainConfig, model_config: M.ModelConfig,
              params: M.ModelParams | None = None) -> tuple[M.ModelParams, LossTrace]:
    """Minimise beta * S(h) + CE over weighted minibatches of the MSA."""
    if msa.length != model_config.L:
        raise M.ConfigError(f"MSA length {msa.length} does not match model L={model_config.L}")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = M.init_model(model_config, rng, M.MATVAE)
    d = model_config.d
    state = AdamState.zeros_like(params)
    trace = LossTrace("vae")
    for step in range(1, config.steps + 1):
        idx = sample_batch(msa, config.batch_size, rng)
        x = one_hot_indices(msa.encoded[idx], d)
        params.zero_grad()
        h, z, x_hat = M.matvae_forward(x, params, rng, "train")
        total, ent, rec = vae_loss_terms(x, h, x_hat, config.beta)
        if not np.isfinite(total.data):
            raise NumericError(
                f"non-finite loss at step {step}: entropy={ent.item()!r} reconstruction={rec.item()!r} "
                f"decoder temperature={float(np.exp(params['dec.raw_temp'].data))!r}"
            )
        T.backward(total)
        _clip(params, config.clip_norm)
        adam_step(params, state, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
        if step % config.log_interval == 0:
            trace.append(step, total.item(), ent.item(), rec.item())
    return params, trace


def mean_latent_entropy(msa: MsaDataset, params: M.ModelParams, batch: int = 512) -> float:
    """Average S(h) over every sequence of the MSA (test phase)."""
    out = []
    for start in range(0, len(msa), batch):
        x = one_hot_indices(msa.encoded[start:start + batch], params.config.d)
        h = M.encode(x, params).data
        out.append(-(h * np.log(h)).sum(axis=-1))
    return float(np.concatenate(out).mean())


# ---------------------------------------------------------------------------
# DMS training


@dataclass
class FoldResult:
    fold: int
    params: M.ModelParams
    train_index: np.ndarray
    val_index: np.ndarray
    predictions: np.ndarray
    trace: LossTrace


@dataclass
class CVResult:
    folds: list[FoldResult]
    predictions: np.ndarray  # one per record, from the fold that held it out
    assignment: np.ndarray


def predict_dms(params: M.ModelParams, onehot: np.ndarray, batch: int = 512) -> np.ndarray:
    out = [M.matenc_forward(onehot[s:s + batch], params).data for s in range(0, len(onehot), batch)]
    return np.concatenate(out) if out else np.zeros(0)


def _fit_matenc(params: M.ModelParams, x: np.ndarray, y: np.ndarray, config: TrainConfig,
                rng: np.random.Generator) -> LossTrace:
    names = None
    if config.freeze_encoder:
        names = {k for k in params.tensors if k.startswith("head.")}
    state = AdamState.zeros_like(params)
    trace = LossTrace("mse")
    n = len(y)
    bs = min(config.batch_size, n)
    for step in range(1, config.steps + 1):
        idx = rng.choice(n, size=bs, replace=False)
        params.zero_grad()
        loss = mse_loss(M.matenc_forward(x[idx], params, rng, "train"), y[idx])
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite MSE at step {step}")
        T.backward(loss)
        _clip(params, config.clip_norm)
        adam_step(params, state, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps, names)
        if step % config.log_interval == 0:
            trace.append(step, loss.item())
    return trace


def _run_cv(dms: DmsDataset, folds: FoldSplit, config: TrainConfig, make_params) -> CVResult:
    if len(folds.assignment) != len(dms):
        raise ValueError(f"fold split covers {len(folds.assignment)} records, dataset has {len(dms)}")
    data = dms.standardized() if config.standardize else dms
    x = data.one_hot()
    y = data.fitness  # predictions are oriented so that higher means fitter
    preds = np.full(len(dms), np.nan)
    results = []
    for f in range(folds.k):
        train_idx, val_idx = folds.indices(f)
        if len(val_idx) < 2 or len(train_idx) < 2:
            raise ValueError(f"fold {f} has too few records (train {len(train_idx)}, validation {len(val_idx)})")
        rng = np.random.default_rng([config.seed, f])
        params = make_params(rng)
        trace = _fit_matenc(params, x[train_idx], y[train_idx], config, rng)
        p = predict_dms(params, x[val_idx])
        preds[val_idx] = p
        results.append(FoldResult(f, params, train_idx, val_idx, p, trace))
        log.info("fold %d done: final mse %s", f, trace.total[-1] if trace.total else "n/a")
    return CVResult(results, preds, folds.assignment.copy())


def train_dms(dms: DmsDataset, folds: FoldSplit, config: TrainConfig, model_config: M.ModelConfig) -> CVResult:
    """k-fold matENC training; every record is predicted once, by the model
    that did not see it."""
    L = len(dms.records[0].encoded)
    if L != model_config.L:
        raise M.ConfigError(f"DMS sequence length {L} does not match model L={model_config.L}")
    return _run_cv(dms, folds, config, lambda rng: M.init_model(model_config, rng, M.MATENC))


def check_compatible(config: M.ModelConfig, dms: DmsDataset) -> None:
    mismatched = []
    L = len(dms.records[0].encoded)
    if config.L != L:
        mismatched.append(f"L (checkpoint {config.L}, dataset {L})")
    if mismatched:
        raise M.ConfigError("checkpoint/dataset mismatch: " + ", ".join(mismatched))


def finetune(pretrained: M.ModelParams, dms: DmsDataset, folds: FoldSplit, config: TrainConfig) -> CVResult:
    """matENC-FT: encoder copied from a trained matVAE, fresh head, then the
    same cross-validated MSE training (encoder trainable unless frozen)."""
    if pretrained.mode != M.MATVAE:
        raise ValueError("finetune needs matVAE parameters")
    check_compatible(pretrained.config, dms)
    return _run_cv(dms, folds, config, lambda rng: M.matenc_from_matvae(pretrained, rng))


def write_predictions(path, dms: DmsDataset, result: CVResult) -> None:
    """Per-record validation predictions with their fold."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mutant", "fold", "predicted", "target", "target_binary"])
        for i, r in enumerate(dms.records):
            w.writerow([r.mutant, int(result.assignment[i]), repr(float(result.predictions[i])), repr(r.score), int(r.label)])
