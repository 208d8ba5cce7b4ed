"""Verification back-end: embedding extraction, centering, whitening, length
normalization, LDA, cosine / two-covariance PLDA scoring and the EER.

Processing order is fixed: center -> whiten -> length-normalize -> LDA, then
either cosine or PLDA scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import forward
from .numerics import eigh_symmetric

EIG_FLOOR = 1e-8


def extract_embeddings(params, cfg, utterances, batch_size: int = 64) -> np.ndarray:
    """One embedding row per utterance (features arrays or Utterance objects)."""
    feats = [getattr(u, "features", u) for u in utterances]
    for f in feats:
        if np.shape(f)[1] != cfg.input_dim:
            raise ValueError(f"feature dim {np.shape(f)[1]} does not match model input {cfg.input_dim}")
    out = np.zeros((len(feats), cfg.embedding_dim))
    for s in range(0, len(feats), batch_size):
        out[s:s + batch_size] = forward(params, cfg, feats[s:s + batch_size]).embedding
    return out


def length_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot length-normalize a zero vector")
    return x / norms


def _inv_sqrt(cov, floor=EIG_FLOOR):
    vals, vecs = eigh_symmetric(cov)
    return (vecs / np.sqrt(np.maximum(vals, floor))) @ vecs.T


def class_scatter(x, labels):
    """Between- and within-class scatter matrices (both normalized by sample count)."""
    labels = np.asarray(labels)
    mu = x.mean(axis=0)
    d = x.shape[1]
    sb, sw = np.zeros((d, d)), np.zeros((d, d))
    for k in np.unique(labels):
        xk = x[labels == k]
        mk = xk.mean(axis=0)
        sb += len(xk) * np.outer(mk - mu, mk - mu)
        sw += (xk - mk).T @ (xk - mk)
    return sb / len(x), sw / len(x)


def lda_projection(x, labels, dim: int, floor=EIG_FLOOR) -> np.ndarray:
    """Top-``dim`` solutions of S_b v = lambda S_w v, scaled so V^T S_w V = I."""
    sb, sw = class_scatter(x, labels)
    t = _inv_sqrt_factor(sw, floor)
    m = t.T @ sb @ t
    _, vecs = eigh_symmetric(0.5 * (m + m.T))
    return t @ vecs[:, :dim]


def _inv_sqrt_factor(cov, floor):
    vals, vecs = eigh_symmetric(cov)
    return vecs / np.sqrt(np.maximum(vals, floor))


@dataclass
class Plda:
    """Two-covariance model: y ~ N(mu, S_b), x = y + e, e ~ N(0, S_w)."""
    mu: np.ndarray
    sigma_b: np.ndarray
    sigma_w: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma_b = np.atleast_2d(np.asarray(self.sigma_b, dtype=np.float64))
        self.sigma_w = np.atleast_2d(np.asarray(self.sigma_w, dtype=np.float64))
        for name, s in (("between", self.sigma_b), ("within", self.sigma_w)):
            vals, _ = eigh_symmetric(s)
            if vals[-1] < -1e-10 * max(1.0, abs(vals[0])):
                raise ValueError(f"{name}-class covariance is not positive semi-definite")
        if eigh_symmetric(self.sigma_w)[0][-1] <= 0:
            raise ValueError("within-class covariance must be positive definite")
        d = len(self.mu)
        tot = self.sigma_b + self.sigma_w
        same = np.block([[tot, self.sigma_b], [self.sigma_b, tot]])
        diff = np.block([[tot, np.zeros((d, d))], [np.zeros((d, d)), tot]])
        p = np.linalg.inv(diff) - np.linalg.inv(same)
        p = 0.5 * (p + p.T)
        # diagonal and cross blocks, symmetrized so that llr(e, t) == llr(t, e) bit for bit
        self._q = 0.25 * (p[:d, :d] + p[d:, d:] + p[:d, :d].T + p[d:, d:].T)
        self._cross = 0.25 * (p[:d, d:] + p[d:, :d] + p[:d, d:].T + p[d:, :d].T)
        self._logdet = np.linalg.slogdet(same)[1] - np.linalg.slogdet(diff)[1]

    @classmethod
    def fit(cls, x, labels, floor=EIG_FLOOR) -> "Plda":
        sb, sw = class_scatter(x, labels)
        vals, vecs = eigh_symmetric(sw)
        sw = (vecs * np.maximum(vals, floor)) @ vecs.T
        return cls(x.mean(axis=0), sb, sw)

    def llr(self, enroll, test) -> np.ndarray:
        """log p(e, t | same) - log p(e, t | different), row-wise."""
        e = np.atleast_2d(enroll) - self.mu
        t = np.atleast_2d(test) - self.mu
        own = np.einsum("ni,ij,nj->n", e, self._q, e) + np.einsum("ni,ij,nj->n", t, self._q, t)
        cross = np.einsum("ni,ij,nj->n", e, self._cross, t) + np.einsum("ni,ij,nj->n", t, self._cross, e)
        return 0.5 * (own + cross) - 0.5 * self._logdet


@dataclass
class BackendModel:
    center: np.ndarray
    whitening: np.ndarray
    lda: np.ndarray | None = None
    plda: Plda | None = None

    def transform(self, x) -> np.ndarray:
        y = length_normalize((np.atleast_2d(x) - self.center) @ self.whitening)
        return y if self.lda is None else y @ self.lda


def fit_backend(embeddings, labels, lda_dim: int | None = 16, floor=EIG_FLOOR) -> BackendModel:
    """Fit centering, whitening, LDA (``lda_dim=None`` skips it) and PLDA."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    speakers, counts = np.unique(labels, return_counts=True)
    if lda_dim is not None:
        if lda_dim >= x.shape[1]:
            raise ValueError(f"LDA dim {lda_dim} must be below the embedding dim {x.shape[1]}")
        if lda_dim >= len(speakers):
            raise ValueError(f"LDA dim {lda_dim} must be below the speaker count {len(speakers)}")
        if np.sum(counts >= 2) < lda_dim + 1:
            raise ValueError("LDA needs lda_dim + 1 speakers with at least two utterances")
    center = x.mean(axis=0)
    cov = np.cov(x - center, rowvar=False, bias=True)
    whitening = _inv_sqrt(np.atleast_2d(cov), floor)
    y = length_normalize((x - center) @ whitening)
    lda = lda_projection(y, labels, lda_dim, floor) if lda_dim is not None else None
    z = y if lda is None else y @ lda
    plda = Plda.fit(z, labels, floor) if np.any(counts >= 2) else None
    return BackendModel(center, whitening, lda, plda)


def score_cosine(backend: BackendModel, enroll, test) -> np.ndarray:
    a = backend.transform(enroll)
    b = backend.transform(test)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("zero-norm vector after back-end processing")
    return np.clip(np.sum(a * b, axis=1) / (na * nb), -1.0, 1.0)


def score_plda(backend: BackendModel, enroll, test) -> np.ndarray:
    if backend.plda is None:
        raise ValueError("back-end was fitted without PLDA")
    return backend.plda.llr(backend.transform(enroll), backend.transform(test))


def score_trials(backend: BackendModel, embeddings, trials, kind: str = "plda") -> np.ndarray:
    e, t = embeddings[trials.enroll], embeddings[trials.test]
    if kind == "cosine":
        return score_cosine(backend, e, t)
    if kind == "plda":
        return score_plda(backend, e, t)
    raise ValueError(f"unknown scoring back-end {kind!r}")


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold.

    A trial is accepted when ``score > threshold``. Thresholds are swept over
    the midpoints between consecutive distinct scores, plus one below the
    lowest score (everything accepted) and the highest score (nothing
    accepted). At the first threshold where FRR >= FAR the ROC is linearly
    interpolated against the previous threshold:
    ``t = -g0 / (g1 - g0)`` with ``g = FRR - FAR`` and
    ``EER = FRR0 + t * (FRR1 - FRR0)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    tar, non = np.sort(scores[labels]), np.sort(scores[~labels])
    if len(tar) == 0 or len(non) == 0:
        raise ValueError("EER needs at least one target and one nontarget score")
    u = np.unique(scores)
    th = np.concatenate([[np.nextafter(u[0], -np.inf)], (u[:-1] + u[1:]) / 2, [u[-1]]])
    frr = np.searchsorted(tar, th, side="right") / len(tar)
    far = (len(non) - np.searchsorted(non, th, side="right")) / len(non)
    g = frr - far
    i = int(np.argmax(g >= 0))
    if g[i] == 0 or i == 0:
        return float(frr[i]), float(th[i])
    t = -g[i - 1] / (g[i] - g[i - 1])
    eer = frr[i - 1] + t * (frr[i] - frr[i - 1])
    return float(eer), float(th[i - 1] + t * (th[i] - th[i - 1]))
