"""Multi-crop video inference with a memory shared by all crops."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datagen import VideoSample, crop_starts
from .learning import Network
from .numcore import no_grad, softmax


@dataclass
class VideoPrediction:
    video_id: int
    per_crop_probs: np.ndarray  # (n_crops, C)
    video_probs: np.ndarray  # (C,)
    predicted: int


@dataclass
class EvalResult:
    video_acc: float
    clip_acc: float
    per_position_acc: np.ndarray  # (n_crops,)
    starts: list[int]


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("CLIPMEM_THREADS", "1")))
    except ValueError:
        return 1


def crop_probs(videos: Sequence[VideoSample], net: Network, L: int, n_crops: int) -> np.ndarray:
    """Per-crop softmax scores ``(V, n_crops, C)``; each video's crops share one memory."""
    if not videos:
        return np.zeros((0, n_crops, net.classifier.bc.shape[0]))
    starts = crop_starts(videos[0].T, L, n_crops)
    frames = np.stack([np.stack([v.frames[s:s + L] for s in starts]) for v in videos])
    with no_grad():
        logits = net.clip_logits(frames)
    return softmax(logits.data)


def infer_video(video: VideoSample, net: Network, L: int, n_crops: int) -> VideoPrediction:
    per_crop = crop_probs([video], net, L, n_crops)[0]
    video_probs = per_crop.mean(axis=0)
    return VideoPrediction(video.video_id, per_crop, video_probs, int(np.argmax(video_probs)))


def _chunks(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def evaluate(videos: Sequence[VideoSample], net: Network, L: int, n_crops: int,
             chunk: int = 250) -> EvalResult:
    """Video accuracy from averaged crop scores, plus per-crop-position accuracy."""
    videos = list(videos)
    parts = _chunks(videos, chunk)
    threads = worker_threads()
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            probs = list(pool.map(lambda p: crop_probs(p, net, L, n_crops), parts))
    else:
        probs = [crop_probs(p, net, L, n_crops) for p in parts]
    probs = np.concatenate(probs)
    labels = np.array([v.label for v in videos])
    video_pred = np.argmax(probs.mean(axis=1), axis=-1)
    crop_pred = np.argmax(probs, axis=-1)
    per_pos = (crop_pred == labels[:, None]).mean(axis=0)
    return EvalResult(
        video_acc=float((video_pred == labels).mean()),
        clip_acc=float(per_pos.mean()),
        per_position_acc=per_pos,
        starts=crop_starts(videos[0].T, L, n_crops),
    )
