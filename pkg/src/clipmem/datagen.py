"""Synthetic XOR-motif videos, clip sampling, and the CMVD1 dataset file."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


class ClipLengthError(ValueError):
    pass


class OracleInapplicableError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, F)
    label: int
    video_id: int

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Clip:
    video_id: int
    start: int
    length: int

    def frames(self, video: VideoSample) -> np.ndarray:
        return video.frames[self.start:self.start + self.length]


@dataclass
class XorMotifTask:
    T: int = 32
    F: int = 16
    noise_sigma: float = 0.1
    n_train: int = 4000
    n_val: int = 1000
    motif_seed: int = 1234

    num_classes = 2

    def validate(self) -> None:
        if self.T < 4:
            raise ConfigError(f"T must be >= 4, got {self.T}")
        if self.F < 4:
            raise ConfigError(f"F must be >= 4 to hold four orthogonal motifs, got {self.F}")
        if self.n_train <= 0 or self.n_val <= 0:
            raise ConfigError("n_train and n_val must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def motifs(self) -> np.ndarray:
        """Rows a0, a1, b0, b1: orthonormal vectors in R^F, fixed per (F, motif_seed)."""
        g = np.random.default_rng(self.motif_seed).standard_normal((self.F, 4))
        q, r = np.linalg.qr(g)
        return (q * np.sign(np.diag(r))).T.copy()


_SPLIT_CODE = {"train": 0, "val": 1}


def _make_split(task: XorMotifTask, seed: int, split: str, n: int) -> list[VideoSample]:
    motifs = task.motifs()
    half = task.T // 2
    # exact label balance; first-half motif drawn independently of the label
    order_rng = np.random.default_rng([seed, _SPLIT_CODE[split], 2**31 - 1])
    labels = order_rng.permutation(np.arange(n) % 2)
    videos = []
    for vid in range(n):
        rng = np.random.default_rng([seed, _SPLIT_CODE[split], vid])
        label = int(labels[vid])
        i = int(rng.integers(2))
        j = i ^ label
        frames = rng.normal(0.0, task.noise_sigma, size=(task.T, task.F)) if task.noise_sigma > 0 \
            else np.zeros((task.T, task.F))
        t_a = int(rng.integers(0, half))
        t_b = int(rng.integers(half, task.T))
        frames[t_a] += motifs[i]
        frames[t_b] += motifs[2 + j]
        videos.append(VideoSample(frames, label, vid))
    return videos


def gen_dataset(task: XorMotifTask, seed: int) -> tuple[list[VideoSample], list[VideoSample]]:
    task.validate()
    return (_make_split(task, seed, "train", task.n_train),
            _make_split(task, seed, "val", task.n_val))


def sample_clips(video: VideoSample, N: int, L: int, rng: np.random.Generator) -> list[Clip]:
    """N uniform clip starts drawn with replacement, in draw order."""
    T = video.T
    if L > T:
        raise ClipLengthError(f"clip length {L} exceeds video length {T}")
    if N < 1:
        raise ConfigError(f"N must be >= 1, got {N}")
    starts = rng.integers(0, T - L + 1, size=N)
    return [Clip(video.video_id, int(s), L) for s in starts]


def crop_starts(T: int, L: int, n_crops: int) -> list[int]:
    if L > T:
        raise ClipLengthError(f"clip length {L} exceeds video length {T}")
    if n_crops < 1:
        raise ConfigError(f"n_crops must be >= 1, got {n_crops}")
    span = T - L
    if n_crops == 1:
        return [int(round(span / 2))]
    return [int(round(i * span / (n_crops - 1))) for i in range(n_crops)]


def uniform_test_crops(video: VideoSample, L: int, n_crops: int) -> list[Clip]:
    return [Clip(video.video_id, s, L) for s in crop_starts(video.T, L, n_crops)]


def bayes_single_clip_accuracy(task: XorMotifTask, L: int) -> float:
    """Best achievable accuracy from one uniformly placed clip, noise-free.

    A clip holding only one motif (or none) leaves the label posterior at
    1/2, since the label XORs that motif index with an independent fair bit.
    Only clips straddling the midpoint can hold both motifs; those decide
    the label outright.
    """
    if 2 * L >= task.T:
        raise OracleInapplicableError(f"L={L} is not below T/2={task.T / 2}")
    half = task.T // 2
    n_starts = task.T - L + 1
    both = 0.0
    for s in range(n_starts):
        p_a = max(0, half - s) / half
        p_b = max(0, min(s + L, task.T) - half) / (task.T - half)
        both += p_a * p_b
    return 0.5 + 0.5 * both / n_starts


# ---------------------------------------------------------------------------
# CMVD1 file format

MAGIC = b"CMVD1"
VERSION = 1


def write_dataset(path: str | Path, videos: list[VideoSample], num_classes: int = 2) -> None:
    if not videos:
        raise FormatError("refusing to write an empty dataset")
    T, F = videos[0].frames.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", VERSION, len(videos), T, F, num_classes))
        for v in videos:
            if v.frames.shape != (T, F):
                raise FormatError(f"video {v.video_id} has shape {v.frames.shape}, expected {(T, F)}")
            fh.write(struct.pack("<I", v.label))
            fh.write(np.ascontiguousarray(v.frames, dtype="<f8").tobytes())


def read_dataset(path: str | Path) -> tuple[list[VideoSample], int]:
    """Return (videos, num_classes); video ids are file positions."""
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:5]!r}")
    version, n, T, F, C = struct.unpack_from("<5I", raw, 5)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 5 + 20
    rec = 4 + 8 * T * F
    if len(raw) != off + n * rec:
        raise FormatError(f"{path}: expected {off + n * rec} bytes, found {len(raw)}")
    videos = []
    for vid in range(n):
        (label,) = struct.unpack_from("<I", raw, off)
        frames = np.frombuffer(raw, dtype="<f8", count=T * F, offset=off + 4).reshape(T, F).astype(np.float64)
        videos.append(VideoSample(frames, int(label), vid))
        off += rec
    return videos, C
