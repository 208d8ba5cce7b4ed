"""Optimization loops: classifier (teacher / short-crop baseline) training,
teacher-student distillation and start-point fine-tuning.

All loops are deterministic functions of their inputs and seed: epoch ``e``
shuffles and crops with ``Rng(seed).spawn(e)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, crop_or_whole
from .network import (EncoderConfig, ParameterSet, SELECTIONS, backward, check_params, forward,
                      init_params, make_batch, replace_classifier, select_groups)
from .numerics import Rng
from .objectives import DistillationConfig, HeadOutputs, composite_loss, head_outputs
from .regularizers import REGULARIZERS, SpReference, penalty

METRIC_COLUMNS = ("epoch", "loss", "class", "kld", "emd", "penalty", "lr")


# ---------------------------------------------------------------------------
# optimizer and schedules


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: ParameterSet, lr, groups=None):
    """One bias-corrected Adam update from ``params.grads``.

    ``lr`` is a float or a ``{group: lr}`` mapping; only ``groups`` (default:
    all) are updated.
    """
    groups = params.group_names if groups is None else list(groups)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for g in groups:
        rate = lr[g] if isinstance(lr, dict) else lr
        for k, w in params.values[g].items():
            grad = params.grads[g][k]
            if grad.shape != w.shape:
                raise ValueError(f"gradient shape {grad.shape} != parameter shape {w.shape} for {g}.{k}")
            key = (g, k)
            if key not in state.m:
                state.m[key] = np.zeros_like(w)
                state.v[key] = np.zeros_like(w)
            m, v = state.m[key], state.v[key]
            if m.shape != w.shape:
                raise ValueError(f"optimizer moment shape mismatch for {g}.{k}")
            m *= state.beta1
            m += (1.0 - state.beta1) * grad
            v *= state.beta2
            v += (1.0 - state.beta2) * grad * grad
            if rate != 0.0:
                w -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def noam_lr(step: int, model_size: int, warmup: int, factor: float = 1.0) -> float:
    if step < 1:
        raise ValueError("Noam schedule is defined for step >= 1")
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    return factor * model_size ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def step_decay_lr(base: float, epoch: int, every: int = 15, factor: float = 0.1) -> float:
    """``base`` divided by 10 (``factor``) every ``every`` epochs, epochs counted from 0."""
    return base * factor ** (epoch // every)


# ---------------------------------------------------------------------------
# configs and results


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    schedule: str = "noam"       # "noam" or "constant"
    base_lr: float = 1e-3        # constant schedule
    noam_model_size: int = 32
    noam_warmup: int = 400
    noam_factor: float = 1.0
    seed: int = 0
    crop_frames: int | None = None  # None: whole utterances

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.schedule not in ("noam", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.crop_frames is not None and self.crop_frames < 1:
            raise ValueError("crop_frames must be positive")

    def lr(self, step: int) -> float:
        if self.schedule == "constant":
            return self.base_lr
        return noam_lr(step, self.noam_model_size, self.noam_warmup, self.noam_factor)


@dataclass(frozen=True)
class FineTuneConfig:
    regularizer: str = "split_l2sp"
    alpha: float = 0.1
    beta: float = 0.01
    selection: str = "last2fc"
    lr_replaced: float = 1e-3
    lr_rest: float = 1e-5
    lr_decay_every: int = 15
    lr_decay_factor: float = 0.1
    epochs: int = 45
    batch_size: int = 32
    crop_frames: int | None = 200
    include_biases: bool = True
    class_loss: str = "softmax"
    asoftmax_margin: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"unknown layer selection {self.selection!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.lr_replaced <= 0 or self.lr_rest <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TrainResult:
    params: ParameterSet
    cfg: EncoderConfig
    history: list[dict]          # one row per epoch
    reference: SpReference | None = None
    initial: dict = field(default_factory=dict)  # losses before the first update


class MetricsLog:
    """Per-epoch tab-separated metrics, one row per epoch (no timing, so reruns are byte-identical)."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        self.initial: dict = {}
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("\t".join(METRIC_COLUMNS) + "\n")

    def add(self, row: dict):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write("\t".join(_fmt(row.get(c, "")) for c in METRIC_COLUMNS) + "\n")


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def class_index(corpus: Corpus) -> dict[int, int]:
    return {s: i for i, s in enumerate(corpus.speakers)}


def _check_corpus(corpus: Corpus, cfg: EncoderConfig):
    if len(corpus.speakers) < 2:
        raise ValueError("training needs at least two speakers")
    if len(corpus.speakers) != cfg.num_classes:
        raise ValueError(f"corpus has {len(corpus.speakers)} speakers but the classifier has "
                         f"{cfg.num_classes} classes")
    if corpus.feature_dim != cfg.input_dim:
        raise ValueError("corpus feature dim does not match the encoder input dim")


def _inputs(corpus, idx, crop_frames, rng):
    if crop_frames is None:
        return [corpus[i].features for i in idx]
    return [crop_or_whole(corpus[i], crop_frames, rng) for i in idx]


class _EpochStats:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.n = 0

    def add(self, report, pen: float, n: int):
        for k, v in {"loss": report.total + pen, "penalty": pen, **report.terms}.items():
            self.sums[k] = self.sums.get(k, 0.0) + v * n
        self.n += n

    def means(self) -> dict:
        return {k: v / max(self.n, 1) for k, v in self.sums.items()}


def _class_grads(params, grads):
    if grads.d_class_weights is not None:
        params.grads["fc2"]["W"] += grads.d_class_weights


def _loss_pass(params, cfg, corpus, dcfg, labels, crop_frames, rng, batch_size, teacher_cache=None):
    """Mean loss over the corpus without updating anything."""
    stats = _EpochStats()
    for s in range(0, len(corpus), batch_size):
        idx = np.arange(s, min(s + batch_size, len(corpus)))
        tr = forward(params, cfg, _inputs(corpus, idx, crop_frames, rng))
        teacher = teacher_cache.take(idx) if teacher_cache is not None else None
        report, _ = composite_loss(dcfg, head_outputs(tr), labels[idx], params.values["fc2"]["W"],
                                   teacher, teacher_cache.fc2 if teacher_cache else None, reduction="mean")
        stats.add(report, 0.0, len(idx))
    return stats.means()


def _fit(params, cfg, corpus, dcfg, tcfg: TrainConfig, log: MetricsLog, teacher_cache=None, on_epoch=None):
    labels = np.array([class_index(corpus)[s] for s in corpus.speaker_ids], dtype=np.int64)
    base = Rng(tcfg.seed)
    init = _loss_pass(params, cfg, corpus, dcfg, labels, tcfg.crop_frames, base.spawn(10 ** 6),
                      tcfg.batch_size, teacher_cache)
    log.initial = init
    opt = AdamState()
    for epoch in range(1, tcfg.epochs + 1):
        rng = base.spawn(epoch)
        order = rng.permutation(len(corpus))
        stats = _EpochStats()
        lr = 0.0
        for s in range(0, len(order), tcfg.batch_size):
            idx = order[s:s + tcfg.batch_size]
            tr = forward(params, cfg, _inputs(corpus, idx, tcfg.crop_frames, rng))
            teacher = teacher_cache.take(idx) if teacher_cache is not None else None
            report, grads = composite_loss(dcfg, head_outputs(tr), labels[idx], params.values["fc2"]["W"],
                                           teacher, teacher_cache.fc2 if teacher_cache else None,
                                           reduction="mean")
            params.zero_grad()
            backward(params, tr, grads.d_logits, grads.d_embedding, grads.d_hidden)
            _class_grads(params, grads)
            lr = tcfg.lr(opt.step + 1)
            adam_step(opt, params, lr)
            stats.add(report, 0.0, len(idx))
        log.add({"epoch": epoch, **stats.means(), "lr": lr})
        if on_epoch is not None:
            on_epoch(epoch, params)
    return log


def train_classifier(corpus: Corpus, cfg: EncoderConfig, tcfg: TrainConfig,
                     dcfg: DistillationConfig | None = None, init: ParameterSet | None = None,
                     metrics_path=None, on_epoch=None) -> TrainResult:
    """Speaker-classification training from scratch (or from ``init``).

    With ``tcfg.crop_frames=None`` every visit sees the whole utterance (the
    long-utterance teacher); with a crop length it is the short-crop baseline.
    """
    dcfg = dcfg or DistillationConfig()
    if dcfg.needs_teacher:
        raise ValueError("classifier training takes only the classification term")
    _check_corpus(corpus, cfg)
    params = init.copy() if init is not None else init_params(cfg, tcfg.seed)
    check_params(params, cfg)
    log = _fit(params, cfg, corpus, dcfg, tcfg, MetricsLog(metrics_path), on_epoch=on_epoch)
    return TrainResult(params, cfg, log.rows, initial=log.initial)


def train_teacher(corpus: Corpus, cfg: EncoderConfig, tcfg: TrainConfig,
                  dcfg: DistillationConfig | None = None, metrics_path=None, on_epoch=None) -> TrainResult:
    """Teacher training on whole long utterances."""
    if tcfg.crop_frames is not None:
        tcfg = TrainConfig(**{**tcfg.__dict__, "crop_frames": None})
    return train_classifier(corpus, cfg, tcfg, dcfg, metrics_path=metrics_path, on_epoch=on_epoch)


@dataclass
class TeacherCache:
    """Frozen-teacher outputs on whole utterances, computed once."""
    logits: np.ndarray
    hidden: np.ndarray
    embedding: np.ndarray
    fc2: np.ndarray

    def take(self, idx) -> HeadOutputs:
        return HeadOutputs(self.logits[idx], self.hidden[idx], self.embedding[idx])


def teacher_outputs(params: ParameterSet, cfg: EncoderConfig, sequences, batch_size: int = 64) -> TeacherCache:
    parts = []
    for s in range(0, len(sequences), batch_size):
        tr = forward(params, cfg, sequences[s:s + batch_size])
        parts.append((tr.logits, tr.hidden, tr.embedding))
    logits, hidden, emb = (np.concatenate(p) for p in zip(*parts))
    return TeacherCache(logits, hidden, emb, params.values["fc2"]["W"].copy())


def train_student(teacher: ParameterSet, cfg: EncoderConfig, corpus: Corpus, dcfg: DistillationConfig,
                  tcfg: TrainConfig, metrics_path=None, on_epoch=None) -> TrainResult:
    """Teacher-student training: student starts as a copy of the teacher, sees
    random ``crop_frames`` crops while the frozen teacher sees whole utterances."""
    _check_corpus(corpus, cfg)
    check_params(teacher, cfg)
    if tcfg.crop_frames is None:
        raise ValueError("student training needs crop_frames")
    cache = None
    if dcfg.needs_teacher:
        cache = teacher_outputs(teacher, cfg, [u.features for u in corpus.utterances])
    student = teacher.copy()
    log = _fit(student, cfg, corpus, dcfg, tcfg, MetricsLog(metrics_path), cache, on_epoch)
    return TrainResult(student, cfg, log.rows, initial=log.initial)


def finetune(student: ParameterSet, cfg: EncoderConfig, corpus: Corpus, ft: FineTuneConfig,
             metrics_path=None, on_epoch=None) -> TrainResult:
    """Start-point fine-tuning on a (small) target corpus.

    The classifier is replaced for the target speakers, the start-point
    reference is the student before any update, only the selected groups
    train, with ``lr_replaced`` on the new classifier and ``lr_rest``
    elsewhere, and the regularizer gradient is added to the task gradient.
    """
    check_params(student, cfg)
    n_classes = len(corpus.speakers)
    params, new_cfg = replace_classifier(student, cfg, n_classes, ft.seed)
    _check_corpus(corpus, new_cfg)
    trainable = select_groups(params, new_cfg, ft.selection)
    ref = SpReference.build(student.snapshot(), trainable, params.modified)
    dcfg = DistillationConfig(class_loss=ft.class_loss, asoftmax_margin=ft.asoftmax_margin)
    labels = np.array([class_index(corpus)[s] for s in corpus.speaker_ids], dtype=np.int64)
    frozen_train = set(trainable)
    log = MetricsLog(metrics_path)
    opt = AdamState()
    base = Rng(ft.seed)
    init = _loss_pass(params, new_cfg, corpus, dcfg, labels, ft.crop_frames, base.spawn(10 ** 6), ft.batch_size)
    log.initial = init
    for epoch in range(1, ft.epochs + 1):
        rng = base.spawn(epoch)
        order = rng.permutation(len(corpus))
        decay = step_decay_lr(1.0, epoch - 1, ft.lr_decay_every, ft.lr_decay_factor)
        lrs = {g: (ft.lr_replaced if g in params.modified else ft.lr_rest) * decay for g in trainable}
        stats = _EpochStats()
        for s in range(0, len(order), ft.batch_size):
            idx = order[s:s + ft.batch_size]
            tr = forward(params, new_cfg, _inputs(corpus, idx, ft.crop_frames, rng))
            report, grads = composite_loss(dcfg, head_outputs(tr), labels[idx], params.values["fc2"]["W"],
                                           reduction="mean")
            params.zero_grad()
            backward(params, tr, grads.d_logits, grads.d_embedding, grads.d_hidden, trainable=frozen_train)
            _class_grads(params, grads)
            pen, pgrads = penalty(ft.regularizer, params, ft.alpha, ft.beta, trainable, ref, ft.include_biases)
            for g, arrs in pgrads.items():
                for k, v in arrs.items():
                    params.grads[g][k] += v
            adam_step(opt, params, lrs, trainable)
            stats.add(report, pen, len(idx))
        log.add({"epoch": epoch, **stats.means(), "lr": lrs.get("fc2", max(lrs.values()))})
        if on_epoch is not None:
            on_epoch(epoch, params)
    return TrainResult(params, new_cfg, log.rows, ref, log.initial)


def start_point_distance(params: ParameterSet, ref: SpReference) -> float:
    """||W_s - W_s0||_2 over the shared groups of ``ref``."""
    sq = 0.0
    for g in ref.shared_groups:
        for k, v in params.values[g].items():
            sq += float(np.sum((v - ref.snapshot[g][k]) ** 2))
    return float(np.sqrt(sq))
