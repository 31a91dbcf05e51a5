"""Video-level objective, optimizer, and the two memory-budget training strategies."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .datagen import Clip, VideoSample, sample_clips
from .memory import CMParams, collaborate, infuse, pop, push
from .model import (BackboneParams, ClassifierParams, assign, classify, encode_clip,
                    load_checkpoint, save_checkpoint)
from .numcore import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class Network:
    backbone: BackboneParams
    classifier: ClassifierParams
    cm: CMParams | None = None

    @classmethod
    def init(cls, cfg: RunConfig, seed: int | None = None, with_cm: bool | None = None) -> "Network":
        seed = cfg.seed if seed is None else seed
        with_cm = cfg.cm.enabled if with_cm is None else with_cm
        m = cfg.model
        rng = np.random.default_rng([seed, 101])
        backbone = BackboneParams.init(rng, cfg.task.F, m.hidden, m.d, m.k)
        classifier = ClassifierParams.init(rng, m.d, m.C)
        cm = None
        if with_cm:
            cm = CMParams.init(np.random.default_rng([seed, 202]), m.d, cfg.cm.reduction_ratio,
                               cfg.cm.variant, cfg.cm.infusion)
        return cls(backbone, classifier, cm)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {**self.backbone.named_parameters(), **self.classifier.named_parameters()}
        if self.cm is not None:
            out.update(self.cm.named_parameters())
        return out

    def clip_logits(self, frames) -> Tensor:
        """``(V, N, L, F)`` frames to ``(V, N, C)`` logits; clips of a video share memory."""
        X = encode_clip(frames, self.backbone)
        if self.cm is not None:
            X = collaborate(X, self.cm)
        return classify(X, self.classifier)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
                for n, p in self.named_parameters().items()}


# ---------------------------------------------------------------------------
# objective

@dataclass
class LossTerms:
    total: Tensor
    clip_term: Tensor
    consensus_term: Tensor


def video_loss_terms(clip_logits, labels, alpha_loss: float) -> LossTerms:
    """Mean clip cross-entropy plus ``alpha_loss`` times the consensus cross-entropy.

    ``clip_logits`` is a list of C-vectors (one video), an ``(N, C)`` tensor,
    or a ``(V, N, C)`` batch; the batch loss is the mean over videos.
    """
    if isinstance(clip_logits, (list, tuple)):
        if not clip_logits:
            raise nc.ContractError("video_loss needs at least one clip")
        clip_logits = nc.stack(list(clip_logits))
    logits = nc.as_tensor(clip_logits)
    if logits.ndim == 2:
        logits = nc.reshape(logits, (1, *logits.shape))
    if logits.ndim != 3 or logits.shape[1] == 0:
        raise nc.ContractError(f"video_loss expects (N, C) or (V, N, C) logits, got {logits.shape}")
    V, N, _ = logits.shape
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64).reshape(-1), (V,))
    per_clip = nc.cross_entropy_rows(logits, np.repeat(labels[:, None], N, axis=1))
    clip_term = nc.mean_over_axes(per_clip)
    H = nc.mean_over_axes(logits, 1)  # consensus: average raw logits over clips
    consensus = nc.mean_over_axes(nc.cross_entropy_rows(H, labels))
    total = nc.add(clip_term, nc.scale(consensus, alpha_loss))
    return LossTerms(total, clip_term, consensus)


def video_loss(clip_logits, label, alpha_loss: float) -> Tensor:
    return video_loss_terms(clip_logits, label, alpha_loss).total


# ---------------------------------------------------------------------------
# strategies

@dataclass
class StepResult:
    loss: float
    clip_loss: float
    consensus_loss: float
    grads: dict[str, np.ndarray]
    clips: list[list[Clip]] = field(default_factory=list)


def _clip_frames(video: VideoSample, clips: Sequence[Clip]) -> np.ndarray:
    return np.stack([c.frames(video) for c in clips])


def train_step_batch_reduction(videos: Sequence[VideoSample], net: Network, cfg: RunConfig,
                               rng: np.random.Generator) -> StepResult:
    """All N clips of every video in one graph; one backward pass."""
    if not videos:
        raise nc.ContractError("batch reduction step needs at least one video")
    t = cfg.train
    clips = [sample_clips(v, t.N, t.L, rng) for v in videos]
    frames = np.stack([_clip_frames(v, cs) for v, cs in zip(videos, clips)])
    labels = np.array([v.label for v in videos])
    net.zero_grad()
    terms = video_loss_terms(net.clip_logits(frames), labels, t.alpha_loss)
    nc.backward(terms.total)
    return StepResult(terms.total.item(), terms.clip_term.item(), terms.consensus_term.item(),
                      net.grads(), clips)


def _multi_iteration_video(video: VideoSample, clips: Sequence[Clip], net: Network,
                           alpha_loss: float, weight: float) -> tuple[float, float, float]:
    cm = net.cm
    # scan 1: encode clip by clip, keep each clip's graph, build the memory
    encoded = [encode_clip(c.frames(video), net.backbone) for c in clips]
    leaves = [X.detach(requires_grad=True) for X in encoded]
    memory_leaf = None
    if cm is not None:
        with_values = [X.detach() for X in encoded]
        memory = push(with_values, cm)
        memory_leaf = type(memory)(memory.variant, memory.value.detach(requires_grad=True))

    def head(X_leaf: Tensor) -> Tensor:
        if cm is None:
            return classify(X_leaf, net.classifier)
        return classify(infuse(X_leaf, pop(memory_leaf, X_leaf, cm), cm), net.classifier)

    # scan 2 (values only), then the loss over detached logits
    logit_leaves = [Tensor(head(X.detach()).data, requires_grad=True) for X in leaves]
    terms = video_loss_terms(logit_leaves, video.label, alpha_loss)
    nc.backward(nc.scale(terms.total, weight))

    # scan 2 again, one clip graph alive at a time, seeded with dL/dlogits
    for X_leaf, lg in zip(leaves, logit_leaves):
        nc.backward(head(X_leaf), lg.grad)

    # dL/dM back through each clip's contribution to the memory
    if cm is not None:
        N = len(clips)
        for X_leaf in leaves:
            contribution = nc.scale(push([X_leaf], cm).value, 1.0 / N)
            nc.backward(contribution, memory_leaf.value.grad)

    for X, X_leaf in zip(encoded, leaves):
        nc.backward(X, X_leaf.grad)
    return terms.total.item(), terms.clip_term.item(), terms.consensus_term.item()


def train_step_multi_iteration(videos, net: Network, cfg: RunConfig,
                               rng: np.random.Generator) -> StepResult:
    """Two-scan unrolled step with exact gradient flow through the memory."""
    if isinstance(videos, VideoSample):
        videos = [videos]
    t = cfg.train
    clips = [sample_clips(v, t.N, t.L, rng) for v in videos]
    net.zero_grad()
    weight = 1.0 / len(videos)
    parts = np.zeros(3)
    for v, cs in zip(videos, clips):
        parts += np.array(_multi_iteration_video(v, cs, net, t.alpha_loss, weight))
    loss, clip_loss, cons = parts * weight
    return StepResult(float(loss), float(clip_loss), float(cons), net.grads(), clips)


STRATEGIES: dict[str, Callable] = {
    "batch_reduction": train_step_batch_reduction,
    "multi_iteration": train_step_multi_iteration,
}


# ---------------------------------------------------------------------------
# optimizer and schedule

def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float, velocity: dict[str, np.ndarray]) -> None:
    """Momentum SGD in place; weight decay skips bias vectors."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise nc.ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        step = g + weight_decay * p.data if (weight_decay and p.ndim > 1) else g
        v = velocity.get(name)
        v = step.copy() if v is None else momentum * v + step
        velocity[name] = v
        p.data -= lr * v


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float,
              beta1: float, weight_decay: float, state: AdamState,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam in place; L2 weight decay on matrices only."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise nc.ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if weight_decay and p.ndim > 1:
            g = g + weight_decay * p.data
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochMetrics:
    epoch: int
    mean_clip_loss: float
    mean_video_loss: float
    total_loss: float
    val_video_acc: float
    val_clip_acc: float
    lr: float


METRICS_HEADER = "epoch,mean_clip_loss,mean_video_loss,total_loss,val_video_acc,val_clip_acc,lr"


def metrics_row(m: EpochMetrics) -> str:
    vals = [m.mean_clip_loss, m.mean_video_loss, m.total_loss, m.val_video_acc, m.val_clip_acc, m.lr]
    return ",".join([str(m.epoch)] + [f"{x:.9g}" for x in vals])


def write_metrics(path: str | Path, rows: Sequence[EpochMetrics]) -> None:
    Path(path).write_text("\n".join([METRICS_HEADER] + [metrics_row(m) for m in rows]) + "\n")


def train(cfg: RunConfig, train_videos: Sequence[VideoSample], val_videos: Sequence[VideoSample],
          net: Network | None = None, epochs: int | None = None,
          on_epoch: Callable[[EpochMetrics], None] | None = None,
          rng_tag: int = 0) -> tuple[Network, list[EpochMetrics]]:
    from .evaluation import evaluate

    net = Network.init(cfg) if net is None else net
    epochs = cfg.train.epochs if epochs is None else epochs
    t = cfg.train
    step_fn = STRATEGIES[t.strategy]
    B = cfg.batch_per_step
    steps_per_epoch = math.ceil(len(train_videos) / B)
    total = epochs * steps_per_epoch
    warmup = t.warmup_epochs * steps_per_epoch
    rng = np.random.default_rng([cfg.seed, 303, rng_tag])
    params = net.named_parameters()
    velocity: dict[str, np.ndarray] = {}
    adam = AdamState()
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_videos))
        sums = np.zeros(3)
        lr = 0.0
        for s in range(steps_per_epoch):
            batch = [train_videos[i] for i in order[s * B:(s + 1) * B]]
            res = step_fn(batch, net, cfg, rng)
            if not math.isfinite(res.loss):
                raise TrainingDiverged(f"non-finite loss {res.loss} at epoch {epoch}, step {s}")
            lr = cosine_lr(step, total, t.base_lr, warmup)
            grads = clip_grad_norm(res.grads, t.grad_clip) if t.grad_clip > 0 else res.grads
            if t.optimizer == "adam":
                adam_step(params, grads, lr, t.momentum, t.weight_decay, adam)
            else:
                sgd_step(params, grads, lr, t.momentum, t.weight_decay, velocity)
            sums += (res.clip_loss, res.consensus_loss, res.loss)
            step += 1
        ev = evaluate(val_videos, net, t.L, cfg.eval.n_crops)
        clip_l, cons_l, tot_l = sums / steps_per_epoch
        m = EpochMetrics(epoch, clip_l, cons_l, tot_l, ev.video_acc, ev.clip_acc, lr)
        history.append(m)
        log.info("epoch %d loss %.4f val video %.4f clip %.4f", epoch, tot_l, ev.video_acc, ev.clip_acc)
        if on_epoch is not None:
            on_epoch(m)
    return net, history


def stage1_config(cfg: RunConfig) -> RunConfig:
    s1 = copy.deepcopy(cfg)
    s1.cm.enabled = False
    s1.train.N = 1
    s1.train.stagewise = False
    s1.train.epochs = cfg.train.stage1_epochs
    return s1


@dataclass
class StagewiseResult:
    net: Network
    stage1: list[EpochMetrics]
    stage2: list[EpochMetrics]
    checkpoint: Path


def train_stagewise(cfg: RunConfig, train_videos, val_videos, checkpoint: str | Path,
                    on_epoch=None) -> StagewiseResult:
    """Backbone+classifier alone first, then joint retraining with fresh memory weights."""
    if not cfg.train.stagewise:
        raise ValueError("train_stagewise needs train.stagewise = true")
    s1 = stage1_config(cfg)
    net1, hist1 = train(s1, train_videos, val_videos, rng_tag=1)
    checkpoint = Path(checkpoint)
    save_checkpoint(checkpoint, net1.named_parameters())

    net2 = Network.init(cfg)
    values = load_checkpoint(checkpoint)
    assign({**net2.backbone.named_parameters(), **net2.classifier.named_parameters()}, values)
    net2, hist2 = train(cfg, train_videos, val_videos, net=net2, on_epoch=on_epoch, rng_tag=2)
    return StagewiseResult(net2, hist1, hist2, checkpoint)
