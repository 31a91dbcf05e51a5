"""Collaborative memory: Push/Pop accumulation and context infusion.

Features are ``(k, d)`` per clip. Every function also accepts a stacked
``(N, k, d)`` clip set or a ``(V, N, k, d)`` batch of videos; memories are
then ``(V, d', d')`` (associative) or ``(V, 1, d')`` (avgpool).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .model import glorot
from .numcore import Tensor, matmul

VARIANTS = ("associative", "avgpool")
INFUSIONS = ("gating", "residual")


class VariantError(ValueError):
    pass


@dataclass
class CMParams:
    W_k: Tensor | None
    W_v: Tensor | None
    W_q: Tensor | None
    W_O: Tensor
    W_I: Tensor | None
    variant: str = "associative"
    infusion: str = "gating"

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, reduction_ratio: int = 4,
             variant: str = "associative", infusion: str = "gating") -> "CMParams":
        if variant not in VARIANTS:
            raise VariantError(f"unknown memory variant {variant!r}")
        if infusion not in INFUSIONS:
            raise VariantError(f"unknown infusion {infusion!r}")
        dp = d // reduction_ratio
        if dp < 1 or d % reduction_ratio:
            raise ValueError(f"reduction ratio {reduction_ratio} does not divide d={d} into d' >= 1")
        assoc = variant == "associative"
        W_k = glorot(rng, d, dp, "cm.W_k") if assoc else None
        W_v = glorot(rng, d, dp, "cm.W_v") if assoc else None
        W_q = glorot(rng, d, dp, "cm.W_q") if assoc else None
        W_I = None if assoc else glorot(rng, d, dp, "cm.W_I")
        # zero W_O: training starts from the uniform 1.5x gate (or identity residual)
        W_O = Tensor(np.zeros((dp, d)), requires_grad=True, name="cm.W_O")
        return cls(W_k, W_v, W_q, W_O, W_I, variant, infusion)

    @property
    def d_prime(self) -> int:
        return self.W_O.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        ts = (self.W_k, self.W_v, self.W_q, self.W_I, self.W_O)
        return {t.name: t for t in ts if t is not None}


@dataclass
class GlobalMemory:
    variant: str
    value: Tensor

    @property
    def size(self) -> int:
        """Stored values per video."""
        per = self.value.shape[-2:]
        return int(per[0] * per[1])


@dataclass
class ClipMemory:
    value: Tensor


def _as_clip_stack(features) -> tuple[Tensor, bool]:
    """Normalize to a ``(V, N, k, d)`` tensor; flag whether V was added."""
    if isinstance(features, (list, tuple)):
        if not features:
            raise ValueError("need at least one clip")
        shapes = {nc.as_tensor(f).shape for f in features}
        if len(shapes) != 1:
            raise nc.ShapeError(f"clip features disagree in shape: {sorted(shapes)}")
        features = nc.stack(list(features))
    features = nc.as_tensor(features)
    if features.ndim == 3:
        return nc.reshape(features, (1, *features.shape)), True
    if features.ndim == 4:
        return features, False
    raise nc.ShapeError(f"expected clip features of rank 3 or 4, got {features.shape}")


def _project(X: Tensor, W: Tensor) -> Tensor:
    """(V, N, k, d) @ (d, d') flattened to (V, N*k, d')."""
    V, N, k, _ = X.shape
    return nc.reshape(matmul(X, W), (V, N * k, W.shape[1]))


def push_associative(features, W_k: Tensor, W_v: Tensor) -> GlobalMemory:
    X, single = _as_clip_stack(features)
    V, N, k, d = X.shape
    K = _project(X, W_k)
    Vv = _project(X, W_v)
    # stacking all N*k rows sums the per-clip outer products in clip order
    M = nc.scale(matmul(nc.batch_transpose(K), Vv), 1.0 / N)
    if single:
        M = nc.reshape(M, M.shape[1:])
    return GlobalMemory("associative", M)


def pop_associative(memory: GlobalMemory, X_n, W_q: Tensor) -> ClipMemory:
    """``(X_n W_q) M`` for one clip ``(k, d)`` or a batch ``(V, N, k, d)``."""
    if memory.variant != "associative":
        raise VariantError(f"pop_associative called on a {memory.variant} memory")
    X_n = nc.as_tensor(X_n)
    M = memory.value
    Q = matmul(X_n, W_q)
    if M.ndim == 2:
        return ClipMemory(matmul(Q, M))
    V, N, k, dp = Q.shape
    out = matmul(nc.reshape(Q, (V, N * k, dp)), M)
    return ClipMemory(nc.reshape(out, (V, N, k, dp)))


def push_avgpool(features, W_I: Tensor) -> GlobalMemory:
    X, single = _as_clip_stack(features)
    V, N, k, d = X.shape
    pooled = nc.mean_over_axes(_project(X, W_I), 1, keepdims=True)  # (V, 1, d')
    if single:
        pooled = nc.reshape(pooled, pooled.shape[1:])
    return GlobalMemory("avgpool", pooled)


def pop_avgpool(memory: GlobalMemory, X_n=None) -> ClipMemory:
    """The pooled row itself, shaped to broadcast over clips when batched."""
    if memory.variant != "avgpool":
        raise VariantError(f"pop_avgpool called on a {memory.variant} memory")
    m = memory.value
    if m.ndim == 3:
        m = nc.reshape(m, (m.shape[0], 1, 1, m.shape[2]))
    return ClipMemory(m)


def push(features, cm: CMParams) -> GlobalMemory:
    if cm.variant == "associative":
        return push_associative(features, cm.W_k, cm.W_v)
    return push_avgpool(features, cm.W_I)


def pop(memory: GlobalMemory, X_n, cm: CMParams) -> ClipMemory:
    if cm.variant == "associative":
        return pop_associative(memory, X_n, cm.W_q)
    return pop_avgpool(memory, X_n)


def infuse_gating(X_n, M_n: ClipMemory, W_O: Tensor) -> Tensor:
    X_n = nc.as_tensor(X_n)
    m = M_n.value
    m_hat = nc.mean_over_axes(m, m.ndim - 2, keepdims=True)  # GAP over positions
    gate = nc.add_scalar(nc.sigmoid(matmul(m_hat, W_O)), 1.0)
    return nc.mul(X_n, gate)


def infuse_residual(X_n, M_n: ClipMemory, W_O: Tensor) -> Tensor:
    return nc.add(nc.as_tensor(X_n), matmul(M_n.value, W_O))


def infuse(X_n, M_n: ClipMemory, cm: CMParams) -> Tensor:
    if cm.infusion == "gating":
        return infuse_gating(X_n, M_n, cm.W_O)
    return infuse_residual(X_n, M_n, cm.W_O)


def collaborate(features, cm: CMParams) -> Tensor:
    """Push all clips, then pop and infuse each one; same shape as the input stack."""
    X, single = _as_clip_stack(features)
    memory = push(X, cm)
    X_hat = infuse(X, pop(memory, X, cm), cm)
    return nc.reshape(X_hat, X_hat.shape[1:]) if single else X_hat


def attention_oracle(all_features: Sequence, n: int, W_q, W_k, W_v) -> np.ndarray:
    """Clip ``n``'s memory as explicit attention over every clip, no global memory."""
    Xs = [np.asarray(nc.as_tensor(x).data) for x in all_features]
    Wq, Wk, Wv = (np.asarray(nc.as_tensor(w).data) for w in (W_q, W_k, W_v))
    q = Xs[n] @ Wq
    out = np.zeros((Xs[n].shape[0], Wv.shape[1]))
    for X_m in Xs:
        scores = q @ (X_m @ Wk).T  # (k, k) unnormalized affinities
        out += scores @ (X_m @ Wv)
    return out / len(Xs)


def flops_cm(N: int, k: int, d: int, d_prime: int) -> int:
    """Multiply-adds of associative memory with gating for N clips."""
    if min(N, k, d, d_prime) < 1:
        raise ValueError("dimensions must be positive")
    return (N * 3 * k * d * d_prime
            + N * k * d_prime * d_prime
            + N * k * d_prime * d_prime
            + N * d_prime * d
            + N * k * d)
