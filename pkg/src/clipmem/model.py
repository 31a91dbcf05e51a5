"""Tiny clip backbone (per-frame MLP + temporal binning) and linear classifier.

Both accept a single clip or arbitrary leading batch axes, so the same
code serves one-clip-at-a-time scans and fully batched training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class ResolutionError(ValueError):
    pass


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class BackboneParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    k: int

    @classmethod
    def init(cls, rng: np.random.Generator, F: int, hidden: int, d: int, k: int) -> "BackboneParams":
        if hidden < 1 or k < 1:
            raise ValueError("hidden and k must be >= 1")
        return cls(
            W1=glorot(rng, F, hidden, "backbone.W1"),
            b1=zeros(hidden, "backbone.b1"),
            W2=glorot(rng, hidden, d, "backbone.W2"),
            b2=zeros(d, "backbone.b2"),
            k=k,
        )

    @property
    def d(self) -> int:
        return self.W2.shape[1]

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.W1, self.b1, self.W2, self.b2)}


@dataclass
class ClassifierParams:
    Wc: Tensor
    bc: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, C: int) -> "ClassifierParams":
        if C < 2:
            raise ValueError("need at least two classes")
        return cls(Wc=glorot(rng, d, C, "classifier.Wc"), bc=zeros(C, "classifier.bc"))

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.Wc, self.bc)}


def bin_matrix(L: int, k: int) -> np.ndarray:
    """(k, L) averaging matrix over contiguous bins; the last bin takes the remainder."""
    if L < k:
        raise ResolutionError(f"clip length {L} is shorter than the {k} temporal bins")
    width = L // k
    P = np.zeros((k, L))
    for b in range(k):
        lo = b * width
        hi = L if b == k - 1 else lo + width
        P[b, lo:hi] = 1.0 / (hi - lo)
    return P


def encode_clip(frames, params: BackboneParams) -> Tensor:
    """Map ``(..., L, F)`` frames to ``(..., k, d)`` clip features."""
    frames = nc.as_tensor(frames)
    *lead, L, F = frames.shape
    P = bin_matrix(L, params.k)
    flat = nc.reshape(frames, (-1, F))
    h = nc.relu(nc.add(nc.matmul(flat, params.W1), params.b1))
    e = nc.add(nc.matmul(h, params.W2), params.b2)
    e = nc.reshape(e, (*lead, L, params.d))
    return nc.pool_rows(e, P)


def classify(features, params: ClassifierParams) -> Tensor:
    """Mean over the k positions, then affine map: ``(..., k, d) -> (..., C)``."""
    features = nc.as_tensor(features)
    pooled = nc.mean_over_axes(features, features.ndim - 2)
    if pooled.ndim == 1:
        logits = nc.reshape(nc.matmul(nc.reshape(pooled, (1, -1)), params.Wc), (-1,))
    else:
        logits = nc.matmul(pooled, params.Wc)
    return nc.add(logits, params.bc)


# ---------------------------------------------------------------------------
# CMCK1 checkpoints

CK_MAGIC = b"CMCK1"
CK_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(CK_MAGIC)
        fh.write(struct.pack("<I", CK_VERSION))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:5] != CK_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:5]!r}")
    (version,) = struct.unpack_from("<I", raw, 5)
    if version != CK_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 9
    out: dict[str, np.ndarray] = {}
    while off < len(raw):
        (n,) = struct.unpack_from("<H", raw, off)
        name = raw[off + 2:off + 2 + n].decode("utf-8")
        off += 2 + n
        (rank,) = struct.unpack_from("<I", raw, off)
        dims = struct.unpack_from(f"<{rank}I", raw, off + 4)
        off += 4 + 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
        off += 8 * count
    return out


def assign(params: dict[str, Tensor], values: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy checkpoint arrays into live tensors in place."""
    for name, t in params.items():
        if name not in values:
            if strict:
                raise KeyError(f"checkpoint is missing {name}")
            continue
        if values[name].shape != t.shape:
            raise ValueError(f"{name}: checkpoint shape {values[name].shape} != {t.shape}")
        t.data[...] = values[name]
