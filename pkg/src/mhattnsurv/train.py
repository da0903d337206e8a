"""Training: Cox partial-likelihood loss, batch-shared feature dropout,
Adam with cosine restarts, and the epoch loop with early stopping on
validation concordance.

Risk scores are only ever compared within a batch, so the loss is the
within-batch partial likelihood; a batch without any observed event has no
likelihood and is skipped (and counted). All randomness is drawn from
labeled streams keyed by (seed, purpose, epoch, ...), which makes whole
runs reproducible in single-threaded mode.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import model as _model
from .data import times_events
from .errors import ConfigError, DimensionError, NoEventBatchError, NumericError
from .evaluate import c_index, predict_risks
from .numerics import RngStream, sample_patches  # noqa: F401  (sample_patches is part of this surface)

MODEL_KINDS = ("mhattn", "avgpool", "gated_attn", "cluster_attn")


@dataclass
class TrainConfig:
    patches_per_patient: int = 32
    patients_per_batch: int = 64
    base_lr: float = 6e-5
    schedule_period: int = 4000
    max_epochs: int = 50000
    eval_every: int = 100
    val_patches: int = 100
    feature_dropout_rate: float = 0.0
    key_dropout_rate: float = 0.0
    heads: int = 8
    seed: int = 0
    patience: int = 50
    precision: str = "float64"

    def __post_init__(self):
        counts = {
            "patches_per_patient": self.patches_per_patient,
            "patients_per_batch": self.patients_per_batch,
            "schedule_period": self.schedule_period,
            "max_epochs": self.max_epochs,
            "eval_every": self.eval_every,
            "val_patches": self.val_patches,
            "heads": self.heads,
            "patience": self.patience,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        for name in ("feature_dropout_rate", "key_dropout_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {rate}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


def cox_loss(risks, times, events) -> tuple[float, np.ndarray]:
    """Negative Cox partial log-likelihood averaged over events, and its
    exact gradient with respect to the risk scores.

    The risk set of an event at time t is every patient with follow-up
    >= t (ties included). The log-sum-exp is max-shifted. Raises
    NoEventBatchError when the batch has no events, since the likelihood
    is then empty; callers skip such batches.
    """
    h = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    if not (h.shape == t.shape == e.shape) or h.ndim != 1 or h.size == 0:
        raise DimensionError(
            f"risks/times/events must be equal-length vectors, got {h.shape}, {t.shape}, {e.shape}"
        )
    if not np.all(np.isfinite(h)):
        raise NumericError("risks contain non-finite values")
    event_idx = np.flatnonzero(e == 1)
    m = event_idx.size
    if m == 0:
        raise NoEventBatchError("batch has no observed events")
    # risk_set[i, k] marks patient k at risk when event i happens
    risk_set = t[None, :] >= t[event_idx, None]
    shifted = np.where(risk_set, h[None, :], -np.inf)
    mx = shifted.max(axis=1)
    exps = np.exp(shifted - mx[:, None])
    exps[~risk_set] = 0.0
    denom = exps.sum(axis=1)
    lse = mx + np.log(denom)
    loss = -(h[event_idx] - lse).sum() / m
    weights = exps / denom[:, None]  # softmax over each risk set
    grad = -(
        (e == 1).astype(np.float64) - weights.sum(axis=0)
    ) / m
    return float(loss), grad


def draw_feature_mask(d: int, rate: float, stream: RngStream) -> np.ndarray:
    """One Bernoulli(1-rate) keep mask over feature channels."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    rng = stream.generator()
    return rng.random(d) >= rate


def scale_feature_mask(keep: np.ndarray, rate: float) -> np.ndarray:
    """Inverted-dropout scaling: survivors divided by the keep probability."""
    return keep.astype(np.float64) / (1.0 - rate)


def feature_dropout(
    S_batch: np.ndarray, rate: float, rng: RngStream, training: bool
) -> np.ndarray:
    """Channel dropout shared across the batch.

    Training draws a single length-d keep mask and applies it to every
    patient row (scaled by 1/(1-rate)), so the surviving feature subset is
    identical for all patients and their risk scores stay comparable.
    Inference (or rate 0) returns the input unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    S_batch = np.asarray(S_batch)
    if S_batch.ndim != 2:
        raise DimensionError(f"expected (patients, d) matrix, got shape {S_batch.shape}")
    if not training or rate == 0.0:
        return S_batch
    keep = draw_feature_mask(S_batch.shape[1], rate, rng)
    return S_batch * scale_feature_mask(keep, rate)[None, :]


def draw_key_mask(shape, rate: float, stream: RngStream) -> np.ndarray:
    """Element-wise Bernoulli(1-rate) keep mask for the key projection."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    rng = stream.generator()
    return rng.random(shape) >= rate


# ---------------------------------------------------------------------------
# Adam + cosine schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = lambda: {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    return AdamState(m=zeros(), v=zeros(), step=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new params, mutates state."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if set(params) != set(grads):
        raise DimensionError(
            f"gradient keys {sorted(grads)} do not match parameter keys {sorted(params)}"
        )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.asarray(p).shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {np.asarray(p).shape} for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Cosine schedule with a hard restart every schedule_period epochs:
    base_lr at each restart, annealed toward 0 mid-cycle, no warmup."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    P = config.schedule_period
    phase = (epoch % P) / P
    return config.base_lr * 0.5 * (1.0 + np.cos(np.pi * phase))


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------


@dataclass
class HistoryRow:
    epoch: int
    step: int
    lr: float
    train_loss: float | None
    val_cindex: float | None
    skipped_batches: int


@dataclass
class TrainResult:
    params: object  # best-validation parameters (final ones if never evaluated)
    best_val_cindex: float | None
    best_epoch: int | None
    history: list[HistoryRow]
    steps: int
    kind: str
    config: TrainConfig


def _init_by_kind(kind: str, d: int, config: TrainConfig, stream: RngStream, bags_for_kmeans):
    if kind == "mhattn":
        return _model.init_params(
            d, config.heads, stream, key_dropout_rate=config.key_dropout_rate
        )
    if kind == "avgpool":
        return _model.init_avgpool_params(d, stream)
    if kind == "gated_attn":
        return _model.init_gated_params(d, stream)
    if kind == "cluster_attn":
        patches = np.concatenate([b.X for b in bags_for_kmeans], axis=0)
        if len(patches) > 4096:
            sel = stream.child("kmeans-subsample").generator().choice(
                len(patches), size=4096, replace=False
            )
            patches = patches[sel]
        centroids = _model.fit_cluster_centroids(
            patches.astype(np.float64), k=min(8, len(patches)), seed=stream.child("kmeans")
        )
        return _model.init_cluster_params(d, centroids, stream.child("attn"))
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def _batch_step(kind, params, X, feature_mask_scaled, key_mask):
    if kind == "mhattn":
        return _model.batch_forward(X, params, key_mask=key_mask, feature_mask_scaled=feature_mask_scaled), _model.backward
    if kind == "avgpool":
        return _model.avgpool_batch_forward(X, params, feature_mask_scaled), _model.avgpool_backward
    if kind == "gated_attn":
        return _model.gated_batch_forward(X, params, feature_mask_scaled), _model.gated_backward
    if kind == "cluster_attn":
        return _model.cluster_batch_forward(X, params, feature_mask_scaled), _model.cluster_backward
    raise ConfigError(f"unknown model kind {kind!r}")


def train(
    train_records: Sequence,
    val_records: Sequence,
    bags,
    config: TrainConfig,
    kind: str = "mhattn",
    stream: RngStream | None = None,
) -> TrainResult:
    """Full training run; returns the best-validation-c-index parameters.

    Per epoch: shuffle patients, cut batches of patients_per_batch (short
    final batch kept), sample patches_per_patient patches per bag, forward
    with batch-shared dropout, Cox loss, exact backward, Adam step at the
    cosine-scheduled rate. Every eval_every epochs the validation c-index
    is computed from one seeded val_patches-per-patient sample; training
    stops after `patience` evaluations without improvement, or at
    max_epochs.
    """
    t_train, e_train = times_events(train_records)
    if e_train.sum() == 0:
        raise ConfigError("training split has no observed events")
    if stream is None:
        stream = RngStream(config.seed, "train")
    d = bags.get(train_records[0].patient_id).d
    for rec in train_records:
        if bags.get(rec.patient_id).d != d:
            raise DimensionError(f"bag {rec.patient_id!r} has inconsistent dimension")
    train_bags = [bags.get(r.patient_id) for r in train_records]
    params = _init_by_kind(kind, d, config, stream.child("init"), train_bags)
    arrays = _model.params_to_arrays(params)
    adam = init_adam(arrays)
    dtype = np.float32 if config.precision == "float32" else np.float64

    shuffle_root = stream.child("shuffle")
    sample_root = stream.child("sample")
    fdrop_root = stream.child("feature-dropout")
    kdrop_root = stream.child("key-dropout")
    val_root = stream.child("val")

    n_train = len(train_records)
    bsz = config.patients_per_batch
    history: list[HistoryRow] = []
    best_val = -np.inf
    best_params = params
    best_epoch: int | None = None
    evals_without_improvement = 0
    steps = 0

    for epoch in range(config.max_epochs):
        lr = cosine_lr(epoch, config)
        order = shuffle_root.child(epoch).generator().permutation(n_train)
        losses = []
        skipped = 0
        for b_index, start in enumerate(range(0, n_train, bsz)):
            batch = order[start : start + bsz]
            eb = e_train[batch]
            if eb.sum() == 0:
                skipped += 1
                continue
            tb = t_train[batch]
            epoch_samples = sample_root.child(epoch)
            rows = []
            for i in batch:
                bag = train_bags[i]
                idx = sample_patches(
                    bag.n, config.patches_per_patient, epoch_samples.child(bag.patient_id)
                )
                rows.append(bag.X[idx])
            X = np.stack(rows).astype(dtype)
            fmask_scaled = None
            if config.feature_dropout_rate > 0.0:
                keep = draw_feature_mask(
                    d, config.feature_dropout_rate, fdrop_root.child(epoch).child(b_index)
                )
                fmask_scaled = scale_feature_mask(keep, config.feature_dropout_rate)
            kmask = None
            if kind == "mhattn" and config.key_dropout_rate > 0.0:
                kmask = draw_key_mask(
                    X.shape, config.key_dropout_rate, kdrop_root.child(epoch).child(b_index)
                )
            (risks, cache), backward_fn = _batch_step(kind, params, X, fmask_scaled, kmask)
            loss, dldr = cox_loss(risks, tb, eb)
            grads = backward_fn(params, cache, dldr)
            arrays = adam_step(arrays, grads, adam, lr)
            params = _model.params_from_arrays(params, arrays)
            losses.append(loss)
            steps += 1

        val_c = None
        if (epoch + 1) % config.eval_every == 0 and val_records:
            val_risks = predict_risks(
                params, val_records, bags, val_root.child(epoch), n_patches=config.val_patches
            )
            tv, ev = times_events(val_records)
            val_c = c_index(val_risks, tv, ev)
            if val_c > best_val:
                best_val = val_c
                best_params = params
                best_epoch = epoch
                evals_without_improvement = 0
            else:
                evals_without_improvement += 1
        history.append(
            HistoryRow(
                epoch=epoch,
                step=steps,
                lr=float(lr),
                train_loss=float(np.mean(losses)) if losses else None,
                val_cindex=val_c,
                skipped_batches=skipped,
            )
        )
        if evals_without_improvement >= config.patience:
            break

    return TrainResult(
        params=best_params,
        best_val_cindex=None if best_epoch is None else float(best_val),
        best_epoch=best_epoch,
        history=history,
        steps=steps,
        kind=kind,
        config=config,
    )


def history_to_csv(history: Sequence[HistoryRow]) -> str:
    """History table as CSV text (missing values are empty fields)."""
    from .data import fmt_float

    lines = ["epoch,step,lr,train_loss,val_cindex,skipped_batches"]
    for row in history:
        loss = "" if row.train_loss is None else fmt_float(row.train_loss)
        val = "" if row.val_cindex is None else fmt_float(row.val_cindex)
        lines.append(
            f"{row.epoch},{row.step},{fmt_float(row.lr)},{loss},{val},{row.skipped_batches}"
        )
    return "\n".join(lines) + "\n"
