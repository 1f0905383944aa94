"""Training orchestration: epochs, multi-crop pairing, self-labeling, checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import AugmentConfig, Dataset, augment_batch, self_label_preset
from .errors import (
    ChecksumError,
    FormatError,
    IncompatibleVersionError,
    InvalidInputError,
    TrainingDivergedError,
)
from .losses import (
    LossBreakdown,
    TwistCoefficients,
    asymmetric_grad_from_logits,
    cross_entropy_grad_from_logits,
    mutual_information_estimate,
    symmetric_grads_from_logits,
    twist_loss_symmetric,
)
from .model import ModelConfig, TwistNet, init_model_from_config
from .numerics import batch_std_profile, check_prob_matrix
from .optim import (
    EmaState,
    LarsConfig,
    ScheduleConfig,
    SgdMomentumState,
    cosine_value,
    ema_momentum,
    ema_update,
    lars_step,
    sgd_momentum_step,
)

log = logging.getLogger(__name__)

PAIRING_MODES = ("all-pairs", "global-anchored")
CHECKPOINT_MAGIC = b"TWST"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    coefficients: TwistCoefficients = TwistCoefficients()
    optimizer: str = "sgd"  # sgd | lars
    lr: float | None = None  # None -> 0.5 * B / 256
    final_lr: float = 0.0
    warmup_epochs: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-5
    trust_coefficient: float = 0.001
    augment: AugmentConfig = AugmentConfig()
    ema: bool = False
    ema_momentum_start: float = 0.99
    ema_momentum_end: float = 0.99
    seed: int = 0
    pairing_mode: str = "all-pairs"
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidInputError("batch_size must be >= 2")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "lars"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if self.pairing_mode not in PAIRING_MODES:
            raise InvalidInputError(f"pairing_mode must be one of {PAIRING_MODES}")

    @property
    def base_lr(self) -> float:
        return 0.5 * self.batch_size / 256 if self.lr is None else self.lr


@dataclass(frozen=True)
class SelfLabelConfig:
    epochs: int = 25
    start_fraction: float = 0.50
    end_fraction: float = 0.60
    lr: float = 0.02
    final_lr: float = 0.0
    batch_size: int = 128
    augment: AugmentConfig | None = None  # None -> narrowed preset of the training views

    def __post_init__(self):
        if not 0.0 < self.start_fraction <= self.end_fraction <= 1.0:
            raise InvalidInputError("need 0 < start_fraction <= end_fraction <= 1")


@dataclass
class EpochReport:
    epoch: int
    loss: LossBreakdown
    mutual_information: float
    grad_mean_abs: float
    col_std: float
    row_std: float
    steps: int
    lr: float
    wall_time: float = 0.0

    def metrics_record(self) -> dict:
        """Deterministic fields only; wall time is logged separately."""
        return {
            "epoch": self.epoch,
            **self.loss.as_dict(),
            "mutual_information": self.mutual_information,
            "grad_mean_abs": self.grad_mean_abs,
            "col_std": self.col_std,
            "row_std": self.row_std,
            "steps": self.steps,
            "lr": self.lr,
        }


@dataclass
class TrainState:
    """Everything that evolves during training."""

    model: TwistNet
    optimizer: SgdMomentumState
    teacher: TwistNet | None = None
    step: int = 0
    epoch: int = 0


def new_train_state(model_config: ModelConfig, cfg: TrainConfig) -> TrainState:
    model = init_model_from_config(model_config, cfg.seed)
    wd = 0.0 if cfg.optimizer == "lars" else cfg.weight_decay
    teacher = model.copy() if cfg.ema else None
    return TrainState(model, SgdMomentumState(cfg.momentum, wd), teacher)


# ---------------------------------------------------------------- multi-crop


def view_pairs(n_views: int, n_global: int, pairing_mode: str) -> list[tuple[int, int]]:
    if pairing_mode not in PAIRING_MODES:
        raise InvalidInputError(f"pairing_mode must be one of {PAIRING_MODES}")
    pairs = [(i, j) for i in range(n_views) for j in range(i + 1, n_views)]
    if pairing_mode == "global-anchored":
        pairs = [(i, j) for i, j in pairs if i < n_global or j < n_global]
    return pairs


def _split_tags(is_global):
    tags = [bool(t) for t in is_global]
    if len(tags) < 2:
        raise InvalidInputError("multi-crop loss needs at least 2 views")
    if not any(tags):
        raise InvalidInputError("multi-crop loss needs at least 1 global view")
    order = [i for i, t in enumerate(tags) if t] + [i for i, t in enumerate(tags) if not t]
    return order, sum(tags)


def multi_crop_loss(views, is_global, coeffs: TwistCoefficients,
                    pairing_mode: str = "all-pairs") -> LossBreakdown:
    """Mean symmetric loss over view pairs.

    ``all-pairs`` treats every view alike; ``global-anchored`` keeps only
    pairs that contain at least one global view.
    """
    order, n_global = _split_tags(is_global)
    views = [check_prob_matrix(views[i]) for i in order]
    pairs = view_pairs(len(views), n_global, pairing_mode)
    return LossBreakdown.mean(twist_loss_symmetric(views[i], views[j], coeffs) for i, j in pairs)


def multi_crop_grads(logits, n_global: int, coeffs: TwistCoefficients, pairing_mode: str):
    """Loss and per-view logit gradients; views are ordered globals first."""
    pairs = view_pairs(len(logits), n_global, pairing_mode)
    grads = [np.zeros_like(z) for z in logits]
    parts = []
    for i, j in pairs:
        b, gi, gj = symmetric_grads_from_logits(logits[i], logits[j], coeffs)
        parts.append(b)
        grads[i] += gi
        grads[j] += gj
    k = len(pairs)
    return LossBreakdown.mean(parts), [g / k for g in grads]


def asymmetric_multi_crop_grads(teacher_logits, student_logits, n_global, coeffs):
    """Teacher global views supervise every other student view."""
    grads = [np.zeros_like(z) for z in student_logits]
    parts = []
    for t in range(n_global):
        for s in range(len(student_logits)):
            if s == t:
                continue
            b, g = asymmetric_grad_from_logits(teacher_logits[t], student_logits[s], coeffs)
            parts.append(b)
            grads[s] += g
    k = len(parts)
    return LossBreakdown.mean(parts), [g / k for g in grads]


# ------------------------------------------------------------------ training


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one sample is dropped."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [perm[s:s + batch_size] for s in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def steps_per_epoch(n: int, batch_size: int) -> int:
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


def lr_schedule(cfg: TrainConfig, n: int) -> ScheduleConfig:
    total = max(1, cfg.epochs * steps_per_epoch(n, cfg.batch_size))
    warmup = min(cfg.warmup_epochs * steps_per_epoch(n, cfg.batch_size), total - 1)
    return ScheduleConfig(cfg.base_lr, cfg.final_lr, total, warmup)


def _threads(cfg: TrainConfig) -> int:
    env = os.environ.get("TWIST_THREADS")
    return max(cfg.threads, int(env)) if env else cfg.threads


def _forward_views(model: TwistNet, views, threads: int):
    if threads > 1:
        # Concurrent running-stat updates make this order-dependent.
        with ThreadPoolExecutor(threads) as pool:
            return [t for _, t in pool.map(model.forward, views)]
    return [model.forward(v)[1] for v in views]


def _optimizer_step(state: TrainState, grads: dict, cfg: TrainConfig, lr: float):
    if cfg.optimizer == "lars":
        lars_cfg = LarsConfig(cfg.trust_coefficient, cfg.weight_decay)
        lars_step(state.model.params, grads, lars_cfg, lr, state.optimizer)
    else:
        sgd_momentum_step(state.model.params, grads, state.optimizer, lr)


def train_step(state: TrainState, batch: np.ndarray, indices, cfg: TrainConfig, epoch: int,
               lr: float, total_steps: int, image_shape=None) -> dict:
    """One optimizer step on one batch; returns per-batch statistics."""
    model = state.model
    bad = [k for k, v in model.params.items() if not np.all(np.isfinite(v))]
    if bad:
        raise TrainingDivergedError(f"non-finite parameters before step {state.step}",
                                    {"step": state.step, "epoch": epoch, "nonfinite_params": bad})
    model.train()
    aug = cfg.augment
    views = augment_batch(batch, indices, aug, cfg.seed, epoch, image_shape)
    traces = _forward_views(model, views, _threads(cfg))
    logits = [t.logits for t in traces]
    coeffs = cfg.coefficients

    if state.teacher is not None:
        state.teacher.train()
        t_logits = [state.teacher.forward(v)[1].logits for v in views[: aug.n_global]]
        breakdown, dlogits = asymmetric_multi_crop_grads(t_logits, logits, aug.n_global, coeffs)
    else:
        breakdown, dlogits = multi_crop_grads(logits, aug.n_global, coeffs, cfg.pairing_mode)

    grads = None
    feature_abs = []
    for trace, g in zip(traces, dlogits):
        gp, fg = model.backward(trace, g, return_feature_grad=True)
        feature_abs.append(float(np.abs(fg).mean()))
        grads = gp if grads is None else {k: grads[k] + gp[k] for k in grads}

    col, row = zip(*(batch_std_profile(t.features) for t in traces))
    stats = {
        "loss": breakdown,
        "mi": float(np.mean([mutual_information_estimate(t.probs) for t in traces])),
        "grad_mean_abs": float(np.mean(feature_abs)),
        "col_std": float(np.mean([c.mean() for c in col])),
        "row_std": float(np.mean([r.mean() for r in row])),
    }
    grad_ok = all(np.all(np.isfinite(g)) for g in grads.values())
    if not (np.isfinite(breakdown.total) and grad_ok):
        diag = {k: (v.as_dict() if isinstance(v, LossBreakdown) else v) for k, v in stats.items()}
        diag.update(step=state.step, epoch=epoch, grads_finite=grad_ok)
        raise TrainingDivergedError(f"non-finite loss or gradient at step {state.step}", diag)

    _optimizer_step(state, grads, cfg, lr)
    if state.teacher is not None:
        m = ema_momentum(cfg.ema_momentum_start, cfg.ema_momentum_end, state.step, total_steps)
        ema_update(EmaState(state.teacher.params), model.params, m)
    state.step += 1
    return stats


def train_epoch(state: TrainState, dataset: Dataset, cfg: TrainConfig, epoch: int) -> EpochReport:
    """One pass over ``ceil(N / B)`` shuffled batches."""
    n = len(dataset)
    if n < cfg.batch_size:
        raise InvalidInputError(f"dataset has {n} samples, fewer than batch size {cfg.batch_size}")
    if dataset.dim != state.model.config.input_dim:
        raise InvalidInputError("dataset dimension does not match the model input")
    sched = lr_schedule(cfg, n)
    start = time.perf_counter()
    records, lr = [], 0.0
    for idx in epoch_batches(n, cfg.batch_size, cfg.seed, epoch):
        lr = cosine_value(sched, min(state.step, sched.total_steps))
        records.append(train_step(state, dataset.samples[idx], idx, cfg, epoch, lr,
                                  sched.total_steps, dataset.image_shape))
    state.epoch = epoch + 1
    return EpochReport(
        epoch=epoch,
        loss=LossBreakdown.mean(r["loss"] for r in records),
        mutual_information=float(np.mean([r["mi"] for r in records])),
        grad_mean_abs=float(np.mean([r["grad_mean_abs"] for r in records])),
        col_std=float(np.mean([r["col_std"] for r in records])),
        row_std=float(np.mean([r["row_std"] for r in records])),
        steps=len(records),
        lr=lr,
        wall_time=time.perf_counter() - start,
    )


def fit(state: TrainState, dataset: Dataset, cfg: TrainConfig, out_dir=None,
        fingerprint: str = "", on_epoch=None) -> list[EpochReport]:
    """Train from ``state.epoch`` up to ``cfg.epochs``.

    With ``out_dir``, appends to ``metrics.jsonl`` and ``timings.jsonl`` and
    writes ``checkpoint.twst`` after each epoch.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reports = []
    for epoch in range(state.epoch, cfg.epochs):
        report = train_epoch(state, dataset, cfg, epoch)
        reports.append(report)
        log.info("epoch %d loss %.5f mi %.4f |g| %.3g", epoch, report.loss.total,
                 report.mutual_information, report.grad_mean_abs)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(report.metrics_record(), sort_keys=True) + "\n")
            with open(out / "timings.jsonl", "a") as fh:
                fh.write(json.dumps({"epoch": epoch, "wall_time": report.wall_time}) + "\n")
            save_checkpoint(out / "checkpoint.twst", make_checkpoint(state, cfg.seed, fingerprint))
        if on_epoch is not None:
            on_epoch(report, state)
    return reports


# --------------------------------------------------------------- prediction


def predict(model: TwistNet, samples, batch_size: int = 4096):
    """Eval-mode probabilities and head features for a whole dataset."""
    probs, feats = [], []
    was = model.training
    model.eval()
    try:
        for s in range(0, len(samples), batch_size):
            p, t = model.forward(samples[s:s + batch_size], update_stats=False)
            probs.append(p)
            feats.append(t.features)
    finally:
        model.training = was
    return np.concatenate(probs), np.concatenate(feats)


# ------------------------------------------------------------ self-labeling


def confidence_select(probs, fraction: float):
    """Indices of the ``ceil(fraction * B)`` most confident rows and their argmax labels.

    Ties in confidence go to the lower row index; ties in argmax to the
    lower class index. Indices are returned in ascending order.
    """
    p = check_prob_matrix(probs)
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError("fraction must lie in (0, 1]")
    b = p.shape[0]
    count = min(b, math.ceil(fraction * b - 1e-9))
    conf = p.max(axis=1)
    order = np.lexsort((np.arange(b), -conf))
    chosen = np.sort(order[:count])
    return chosen, np.argmax(p[chosen], axis=1)


def self_label_fraction(cfg: SelfLabelConfig, step: int, total_steps: int) -> float:
    sched = ScheduleConfig(cfg.start_fraction, cfg.end_fraction, max(1, total_steps - 1))
    return cosine_value(sched, min(step, sched.total_steps))


SELF_LABEL_EPOCH_OFFSET = 1_000_000


def self_label_stage(state: TrainState, dataset: Dataset, cfg: SelfLabelConfig,
                     train_cfg: TrainConfig, seed: int | None = None,
                     history: list | None = None) -> TrainState:
    """Fine-tune on hard labels taken from confident global-view predictions.

    Per batch the global views are scored in eval mode, their probabilities
    averaged, and the most confident rows labeled by argmax. Every view is
    then trained with cross-entropy against those labels on the selected
    rows. ``history`` (if given) receives one dict per step with the
    scheduled and realized selection fractions.
    """
    seed = train_cfg.seed if seed is None else seed
    aug = cfg.augment or self_label_preset(train_cfg.augment)
    n = len(dataset)
    if n < cfg.batch_size:
        raise InvalidInputError("dataset smaller than the self-labeling batch size")
    total = cfg.epochs * steps_per_epoch(n, cfg.batch_size)
    lr_sched = ScheduleConfig(cfg.lr, cfg.final_lr, max(1, total))
    opt = SgdMomentumState(train_cfg.momentum, train_cfg.weight_decay)
    model = state.model
    step = 0
    for e in range(cfg.epochs):
        epoch_tag = SELF_LABEL_EPOCH_OFFSET + e
        for idx in epoch_batches(n, cfg.batch_size, seed, epoch_tag):
            views = augment_batch(dataset.samples[idx], idx, aug, seed, epoch_tag, dataset.image_shape)
            g_probs = np.mean([model.predict_proba(v) for v in views[: aug.n_global]], axis=0)
            fraction = self_label_fraction(cfg, step, total)
            chosen, labels = confidence_select(g_probs, fraction)
            if history is not None:
                history.append({"step": step, "fraction": fraction,
                                "selected": len(chosen) / len(idx), "batch": len(idx)})
            if len(chosen) == 0:
                log.warning("self-label step %d selected no samples; skipped", step)
                step += 1
                continue
            model.train()
            grads = None
            for v in views:
                _, trace = model.forward(v)
                dlogits = np.zeros_like(trace.logits)
                _, g_sel = cross_entropy_grad_from_logits(trace.logits[chosen], labels, 1.0 / len(views))
                dlogits[chosen] = g_sel
                gp = model.backward(trace, dlogits)
                grads = gp if grads is None else {k: grads[k] + gp[k] for k in grads}
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(f"non-finite gradient at self-label step {step}")
            sgd_momentum_step(model.params, grads, opt, cosine_value(lr_sched, min(step, total)))
            step += 1
    return state


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict
    buffers: dict
    velocity: dict
    model_config: dict
    step: int
    epoch: int
    rng: dict  # seeds the counter-based streams: {"seed": int}
    optimizer: dict = field(default_factory=dict)  # momentum, weight_decay
    fingerprint: str = ""
    ema_params: dict | None = None
    ema_buffers: dict | None = None
    version: int = CHECKPOINT_VERSION


def make_checkpoint(state: TrainState, seed: int, fingerprint: str = "") -> Checkpoint:
    return Checkpoint(
        params={k: v.copy() for k, v in state.model.params.items()},
        buffers={k: v.copy() for k, v in state.model.buffers.items()},
        velocity={k: v.copy() for k, v in state.optimizer.velocity.items()},
        model_config=_config_dict(state.model.config),
        step=state.step,
        epoch=state.epoch,
        rng={"seed": int(seed)},
        optimizer={"momentum": state.optimizer.momentum,
                   "weight_decay": state.optimizer.weight_decay},
        fingerprint=fingerprint,
        ema_params=None if state.teacher is None else {k: v.copy() for k, v in state.teacher.params.items()},
        ema_buffers=None if state.teacher is None else {k: v.copy() for k, v in state.teacher.buffers.items()},
    )


def _config_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["backbone_widths"] = list(d["backbone_widths"])
    d["head_widths"] = list(d["head_widths"])
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["backbone_widths"] = tuple(d["backbone_widths"])
    d["head_widths"] = tuple(d["head_widths"])
    return ModelConfig(**d)


def state_from_checkpoint(cp: Checkpoint) -> TrainState:
    config = model_config_from_dict(cp.model_config)
    model = TwistNet(config, {k: v.copy() for k, v in cp.params.items()},
                     {k: v.copy() for k, v in cp.buffers.items()})
    opt = SgdMomentumState(cp.optimizer.get("momentum", 0.9), cp.optimizer.get("weight_decay", 0.0),
                           {k: v.copy() for k, v in cp.velocity.items()})
    teacher = None
    if cp.ema_params is not None:
        teacher = TwistNet(config, {k: v.copy() for k, v in cp.ema_params.items()},
                           {k: v.copy() for k, v in (cp.ema_buffers or {}).items()})
    return TrainState(model, opt, teacher, cp.step, cp.epoch)


_TENSOR_GROUPS = ("params", "buffers", "velocity", "ema_params", "ema_buffers")


def _encode_checkpoint(cp: Checkpoint) -> bytes:
    meta = {
        "model_config": cp.model_config,
        "step": cp.step,
        "epoch": cp.epoch,
        "rng": cp.rng,
        "optimizer": cp.optimizer,
        "fingerprint": cp.fingerprint,
        "has_ema": cp.ema_params is not None,
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", cp.version))
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    tensors = []
    for group in _TENSOR_GROUPS:
        for name, arr in (getattr(cp, group) or {}).items():
            tensors.append((f"{group}/{name}", np.asarray(arr, dtype=np.float64)))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, cp: Checkpoint) -> None:
    data = _encode_checkpoint(cp)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file", offset=0)
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise IncompatibleVersionError(version, CHECKPOINT_VERSION)
    if len(data) < 8 + 32 or hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise ChecksumError(f"{path}: checksum mismatch (file truncated or corrupted)")
    body = memoryview(data)[:-32]
    pos = 8
    try:
        (mlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(bytes(body[pos:pos + mlen]))
        pos += mlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        groups = {g: {} for g in _TENSOR_GROUPS}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            full = bytes(body[pos:pos + nlen]).decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            group, name = full.split("/", 1)
            groups[group][name] = arr.astype(np.float64)
    except (struct.error, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: malformed checkpoint body ({exc})", offset=pos) from None
    if pos != len(body):
        raise FormatError(f"{path}: trailing bytes in checkpoint body", offset=pos)
    has_ema = meta["has_ema"]
    return Checkpoint(
        params=groups["params"],
        buffers=groups["buffers"],
        velocity=groups["velocity"],
        model_config=meta["model_config"],
        step=meta["step"],
        epoch=meta["epoch"],
        rng=meta["rng"],
        optimizer=meta["optimizer"],
        fingerprint=meta["fingerprint"],
        ema_params=groups["ema_params"] if has_ema else None,
        ema_buffers=groups["ema_buffers"] if has_ema else None,
        version=version,
    )


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Field-by-field bitwise comparison."""
    return _encode_checkpoint(a) == _encode_checkpoint(b)
