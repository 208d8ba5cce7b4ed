"""Fine-tuning penalties: weight decay and the start-point family.

Parameters are passed as a mapping ``group -> {array name -> array}`` (a
:class:`~svdistill.network.ParameterSet` ``.values`` dict works directly).
Each penalty only sees the groups it is given; frozen groups should simply
not be passed. Every function returns ``(value, grads)`` with ``grads`` in
the same nested layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REGULARIZERS = ("none", "l2", "l2sp", "split_l2sp", "l1sp")


@dataclass(frozen=True)
class SpReference:
    """Frozen start point W0 plus the shared/modified partition of the groups."""
    snapshot: dict
    shared_groups: tuple
    modified_groups: tuple

    def __post_init__(self):
        overlap = set(self.shared_groups) & set(self.modified_groups)
        if overlap:
            raise ValueError(f"groups both shared and modified: {sorted(overlap)}")

    @classmethod
    def build(cls, snapshot, trainable, modified) -> "SpReference":
        """Shared = trainable groups not modified; modified = trainable ∩ modified."""
        snap = _values(snapshot)
        shared = tuple(g for g in trainable if g not in modified)
        mod = tuple(g for g in trainable if g in modified)
        return cls(snap, shared, mod)


def _keep(name: str, include_biases: bool) -> bool:
    return include_biases or name != "b"


def _values(params):
    return params if isinstance(params, dict) else params.values


def _zero_grads(W, groups):
    return {g: {k: np.zeros_like(v) for k, v in W[g].items()} for g in groups}


def _check_shared(W, ref: SpReference, groups):
    for g in groups:
        if g in ref.modified_groups:
            raise ValueError(f"group {g!r} is modified and cannot be compared to the snapshot")
        if g not in ref.snapshot:
            raise ValueError(f"group {g!r} missing from the start-point snapshot")
        for k, v in W[g].items():
            if ref.snapshot[g][k].shape != np.shape(v):
                raise ValueError(f"shape mismatch with snapshot for {g}.{k}")


def l2_norm_penalty(params, alpha: float, groups=None, include_biases: bool = True):
    """alpha * ||W||^2 (weight decay)."""
    W = _values(params)
    groups = list(W) if groups is None else list(groups)
    grads = _zero_grads(W, groups)
    value = 0.0
    for g in groups:
        for k, v in W[g].items():
            if _keep(k, include_biases):
                value += alpha * float(np.sum(v * v))
                grads[g][k] = 2.0 * alpha * v
    return value, grads


def _sq_distance(W, ref, groups, alpha, include_biases, grads):
    value = 0.0
    for g in groups:
        for k, v in W[g].items():
            if _keep(k, include_biases):
                d = v - ref.snapshot[g][k]
                value += alpha * float(np.sum(d * d))
                grads[g][k] = grads[g][k] + 2.0 * alpha * d
    return value


def _sq_norm(W, groups, beta, include_biases, grads):
    value = 0.0
    for g in groups:
        for k, v in W[g].items():
            if _keep(k, include_biases):
                value += beta * float(np.sum(v * v))
                grads[g][k] = grads[g][k] + 2.0 * beta * v
    return value


def l2_sp_penalty(params, ref: SpReference, alpha: float, groups=None, include_biases: bool = True):
    """alpha * ||W - W0||^2 over the given groups (default: the shared groups)."""
    W = _values(params)
    groups = list(ref.shared_groups) if groups is None else list(groups)
    _check_shared(W, ref, groups)
    grads = _zero_grads(W, groups)
    return _sq_distance(W, ref, groups, alpha, include_biases, grads), grads


def split_l2_sp_penalty(params, ref: SpReference, alpha: float, beta: float,
                        include_biases: bool = True):
    """alpha * ||W_s - W_s0||^2 + beta * ||W_m||^2."""
    W = _values(params)
    _check_shared(W, ref, ref.shared_groups)
    groups = list(ref.shared_groups) + list(ref.modified_groups)
    grads = _zero_grads(W, groups)
    value = _sq_distance(W, ref, ref.shared_groups, alpha, include_biases, grads)
    value += _sq_norm(W, ref.modified_groups, beta, include_biases, grads)
    return value, grads


def l1_sp_penalty(params, ref: SpReference, alpha: float, beta: float,
                  include_biases: bool = True):
    """alpha * ||W_s - W_s0||_1 + beta * ||W_m||^2, subgradient sign(0) = 0."""
    W = _values(params)
    _check_shared(W, ref, ref.shared_groups)
    groups = list(ref.shared_groups) + list(ref.modified_groups)
    grads = _zero_grads(W, groups)
    value = 0.0
    for g in ref.shared_groups:
        for k, v in W[g].items():
            if _keep(k, include_biases):
                d = v - ref.snapshot[g][k]
                value += alpha * float(np.sum(np.abs(d)))
                grads[g][k] = grads[g][k] + alpha * np.sign(d)
    value += _sq_norm(W, ref.modified_groups, beta, include_biases, grads)
    return value, grads


def penalty(kind: str, params, alpha: float, beta: float, trainable, ref: SpReference | None = None,
            include_biases: bool = True):
    """Dispatch by regularizer name. ``none`` returns zero with empty grads."""
    if kind == "none":
        return 0.0, {}
    if kind == "l2":
        return l2_norm_penalty(params, alpha, trainable, include_biases)
    if ref is None:
        raise ValueError(f"regularizer {kind!r} needs a start-point reference")
    if kind == "l2sp":
        return l2_sp_penalty(params, ref, alpha, include_biases=include_biases)
    if kind == "split_l2sp":
        return split_l2_sp_penalty(params, ref, alpha, beta, include_biases)
    if kind == "l1sp":
        return l1_sp_penalty(params, ref, alpha, beta, include_biases)
    raise ValueError(f"unknown regularizer {kind!r}; expected one of {REGULARIZERS}")
