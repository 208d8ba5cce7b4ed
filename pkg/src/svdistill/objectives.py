"""Training objectives: classification losses, the two distillation terms and
their weighted combination.

Every loss works on a batch (rows) and returns the batch *sum* together with
its gradient; callers that want a batch mean divide both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import log_softmax, softmax

CLASS_LOSSES = ("softmax", "asoftmax")


@dataclass(frozen=True)
class DistillationConfig:
    class_loss: str = "softmax"
    asoftmax_margin: int = 2
    use_class: bool = True
    use_kld: bool = False
    use_emd: bool = False
    weight_class: float = 1.0
    weight_kld: float = 1.0
    weight_emd: float = 1.0
    # 1.0 reproduces the plain teacher-posterior loss; other values soften both
    # posteriors as in Hinton-style distillation
    temperature: float = 1.0

    def __post_init__(self):
        if self.class_loss not in CLASS_LOSSES:
            raise ValueError(f"unknown class_loss {self.class_loss!r}")
        if not (self.use_class or self.use_kld or self.use_emd):
            raise ValueError("at least one loss term must be active")
        if int(self.asoftmax_margin) != self.asoftmax_margin or self.asoftmax_margin < 1:
            raise ValueError(f"asoftmax_margin must be an integer >= 1, got {self.asoftmax_margin}")
        if min(self.weight_class, self.weight_kld, self.weight_emd) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def needs_teacher(self) -> bool:
        return self.use_kld or self.use_emd


@dataclass
class LossReport:
    total: float
    terms: dict[str, float] = field(default_factory=dict)


def _rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def _labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n_rows,):
        raise ValueError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range for {n_classes} classes")
    return labels


def softmax_ce(logits, labels):
    """Cross-entropy of softmax posteriors; returns (sum over rows, d_logits)."""
    z = _rows(logits)
    labels = _labels(labels, z.shape[0], z.shape[1])
    logp = log_softmax(z)
    rows = np.arange(z.shape[0])
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad = grad.reshape(np.shape(logits))
    return float(-logp[rows, labels].sum()), grad


# ---------------------------------------------------------------------------
# angular margin softmax


def _chebyshev(m: int, c: np.ndarray):
    """T_m(c) and its derivative m * U_{m-1}(c), by the three-term recurrences."""
    t_prev, t = np.ones_like(c), c.copy()
    u_prev, u = np.zeros_like(c), np.ones_like(c)  # U_{-1}, U_0
    if m == 0:
        return t_prev, np.zeros_like(c)
    for _ in range(m - 1):
        t_prev, t = t, 2 * c * t - t_prev
        u_prev, u = u, 2 * c * u - u_prev
    return t, m * u


def margin_psi(cos_theta, m: int):
    """psi(theta) = (-1)^k cos(m theta) - 2k on [k pi/m, (k+1) pi/m], and d psi / d cos theta."""
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), -1.0, 1.0)
    theta = np.arccos(c)
    k = np.minimum(np.floor(m * theta / np.pi), m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    t, dt = _chebyshev(m, c)
    return sign * t - 2.0 * k, sign * dt


def _normalize_rows(w):
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm class weight")
    return w / norms, norms


def cosine_logits(weights, embedding):
    """Margin-free logits ||x|| cos(theta_j) = w_j/||w_j|| . x; weights are class rows.

    Returns (logits, backward) where ``backward(d_logits)`` gives
    (d_weights, d_embedding).
    """
    w = np.asarray(weights, dtype=np.float64)
    x = _rows(embedding)
    w_hat, norms = _normalize_rows(w)
    logits = x @ w_hat.T

    def backward(d_logits):
        d_logits = _rows(d_logits)
        d_what = d_logits.T @ x
        d_w = (d_what - np.sum(d_what * w_hat, axis=1, keepdims=True) * w_hat) / norms
        return d_w, (d_logits @ w_hat).reshape(np.shape(embedding))

    return logits, backward


def asoftmax_ce(weights, embedding, labels, m: int = 2):
    """Angular-margin softmax cross-entropy.

    ``weights`` holds one row per class (normalized inside), ``embedding`` one
    row per sample. Returns (sum over rows, d_weights, d_embedding).
    """
    if int(m) != m or m < 1:
        raise ValueError(f"margin must be an integer >= 1, got {m}")
    m = int(m)
    w = np.asarray(weights, dtype=np.float64)
    x = _rows(embedding)
    labels = _labels(labels, x.shape[0], w.shape[0])
    r = np.linalg.norm(x, axis=1)
    if np.any(r == 0):
        raise ValueError("zero-norm embedding")
    w_hat, norms = _normalize_rows(w)
    rows = np.arange(x.shape[0])
    f = x @ w_hat.T                                  # r cos theta_j
    cos_y = f[rows, labels] / r
    psi, dpsi = margin_psi(cos_y, m)
    f[rows, labels] = r * psi
    logp = log_softmax(f)
    value = float(-logp[rows, labels].sum())

    df = np.exp(logp)
    df[rows, labels] -= 1.0
    df_y = df[rows, labels].copy()
    df_other = df.copy()
    df_other[rows, labels] = 0.0
    x_hat = x / r[:, None]
    wy = w_hat[labels]
    # target logit r psi(c): d/dx = psi x_hat + psi' (w_y - c x_hat); d/dw_hat_y = psi' x
    dx = df_other @ w_hat
    dx += df_y[:, None] * (psi[:, None] * x_hat + dpsi[:, None] * (wy - cos_y[:, None] * x_hat))
    d_what = df_other.T @ x
    np.add.at(d_what, labels, (df_y * dpsi)[:, None] * x)
    d_w = (d_what - np.sum(d_what * w_hat, axis=1, keepdims=True) * w_hat) / norms
    return value, d_w, dx.reshape(np.shape(embedding))


# ---------------------------------------------------------------------------
# distillation terms


def kld_distill(teacher_logits, student_logits, temperature: float = 1.0):
    """-sum_i sum_n P_T(n|i) log P_S(n|i); the teacher side is a constant.

    Returns (value, d_student_logits).
    """
    t, s = _rows(teacher_logits), _rows(student_logits)
    if t.shape != s.shape:
        raise ValueError(f"teacher/student logits shape mismatch: {t.shape} vs {s.shape}")
    p_t = softmax(t / temperature)
    logp_s = log_softmax(s / temperature)
    value = float(-np.sum(p_t * logp_s))
    grad = (np.exp(logp_s) - p_t) / temperature
    return value, grad.reshape(np.shape(student_logits))


def emd_cosine(teacher_emb, student_emb):
    """-sum_i cos(eps_T^i, eps_S^i); returns (value, d_student_emb)."""
    t, s = _rows(teacher_emb), _rows(student_emb)
    if t.shape != s.shape:
        raise ValueError(f"embedding shape mismatch: {t.shape} vs {s.shape}")
    nt = np.linalg.norm(t, axis=1, keepdims=True)
    ns = np.linalg.norm(s, axis=1, keepdims=True)
    if np.any(nt == 0) or np.any(ns == 0):
        raise ValueError("zero-norm embedding")
    t_hat, s_hat = t / nt, s / ns
    # 1 - |a - b|^2 / 2 equals a.b for unit vectors and is exactly 1 when a == b
    diff = t_hat - s_hat
    cos = 1.0 - 0.5 * np.sum(diff * diff, axis=1, keepdims=True)
    grad = -(t_hat - cos * s_hat) / ns
    return float(-cos.sum()), grad.reshape(np.shape(student_emb))


# ---------------------------------------------------------------------------
# combination


@dataclass
class HeadOutputs:
    """What a loss needs from one network pass."""
    logits: np.ndarray      # linear fc2 logits
    hidden: np.ndarray      # classifier input
    embedding: np.ndarray   # embedding tap


@dataclass
class LossGrads:
    d_logits: np.ndarray | None = None
    d_embedding: np.ndarray | None = None
    d_hidden: np.ndarray | None = None
    d_class_weights: np.ndarray | None = None  # gradient for fc2.W, (E, N) layout


def posterior_logits(cfg: DistillationConfig, out: HeadOutputs, fc2_weights):
    """Logits whose softmax is the model posterior: linear for softmax heads,
    margin-free cosine logits for angular-margin heads."""
    if cfg.class_loss == "softmax":
        return out.logits, None
    return cosine_logits(np.asarray(fc2_weights).T, out.hidden)


def composite_loss(cfg: DistillationConfig, student: HeadOutputs, labels, fc2_weights=None,
                   teacher: HeadOutputs | None = None, teacher_fc2_weights=None,
                   reduction: str = "sum"):
    """Weighted sum of the active terms; returns (LossReport, LossGrads).

    ``fc2_weights`` (E x N) is needed for the angular-margin head, where the
    class logits are built from the normalized classifier weights.
    """
    if cfg.needs_teacher and teacher is None:
        raise ValueError("teacher outputs are required when a distillation term is active")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if cfg.class_loss == "asoftmax" and fc2_weights is None:
        raise ValueError("the angular-margin head needs the classifier weights")
    scale = 1.0 / len(student.logits) if reduction == "mean" else 1.0
    terms: dict[str, float] = {}
    grads = LossGrads()
    d_logits = np.zeros_like(student.logits) if cfg.class_loss == "softmax" else None
    d_hidden = np.zeros_like(student.hidden) if cfg.class_loss == "asoftmax" else None
    d_w = np.zeros_like(fc2_weights) if cfg.class_loss == "asoftmax" else None

    s_logits, s_back = posterior_logits(cfg, student, fc2_weights)

    if cfg.use_class:
        if cfg.class_loss == "softmax":
            v, g = softmax_ce(student.logits, labels)
            d_logits += cfg.weight_class * scale * g
        else:
            v, gw, gx = asoftmax_ce(np.asarray(fc2_weights).T, student.hidden, labels, cfg.asoftmax_margin)
            d_w += cfg.weight_class * scale * gw.T
            d_hidden += cfg.weight_class * scale * gx
        terms["class"] = v * scale

    if cfg.use_kld:
        t_logits, _ = posterior_logits(cfg, teacher, teacher_fc2_weights)
        v, g = kld_distill(t_logits, s_logits, cfg.temperature)
        g = cfg.weight_kld * scale * g
        if s_back is None:
            d_logits += g
        else:
            gw, gx = s_back(g)
            d_w += gw.T
            d_hidden += gx
        terms["kld"] = v * scale

    if cfg.use_emd:
        v, g = emd_cosine(teacher.embedding, student.embedding)
        grads.d_embedding = cfg.weight_emd * scale * g
        terms["emd"] = v * scale

    weights = {"class": cfg.weight_class, "kld": cfg.weight_kld, "emd": cfg.weight_emd}
    total = float(sum(weights[k] * v for k, v in terms.items()))
    grads.d_logits, grads.d_hidden, grads.d_class_weights = d_logits, d_hidden, d_w
    return LossReport(total, terms), grads


def head_outputs(trace) -> HeadOutputs:
    return HeadOutputs(logits=trace.logits, hidden=trace.hidden, embedding=trace.embedding)
