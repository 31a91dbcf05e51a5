"""Fixed-seed property suites behind ``clipmem verify``.

Each suite returns a list of :class:`Check`; a suite passes when every check
does. Suites never train a model, so each finishes in seconds.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import datagen as dg
from . import memory as cm
from . import numcore as nc
from .config import RunConfig
from .learning import Network, train_step_batch_reduction, train_step_multi_iteration, video_loss
from .model import load_checkpoint, save_checkpoint
from .numcore import Tensor


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error and all(c.ok for c in self.checks)


def _check(name: str, value: float, tol: float) -> Check:
    return Check(name, bool(value <= tol), f"{value:.3g} <= {tol:g}")


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# suites

def suite_numcore() -> list[Check]:
    rng = np.random.default_rng(11)
    out = []
    A = _t([[1, 2], [3, 4]])
    out.append(Check("identity matmul", np.array_equal(nc.matmul(_t(np.eye(2)), A).data, A.data)))
    out.append(Check("transpose", np.array_equal(nc.transpose(A).data, [[1, 3], [2, 4]])))
    s = nc.sigmoid(_t([50.0])).data[0]
    out.append(Check("sigmoid saturation", 1 - s < 1e-20 and s <= 1.0 and math.isfinite(s)))
    out.append(_check("uniform CE", abs(nc.softmax_cross_entropy(_t(np.zeros(4)), 2).item() - math.log(4)), 1e-12))
    out.append(Check("saturated CE", nc.softmax_cross_entropy(_t([100.0, 0.0]), 0).item() < 1e-20))

    z = Tensor(rng.normal(size=5), requires_grad=True, name="z")
    loss = nc.softmax_cross_entropy(z, 3)
    nc.backward(loss)
    expected = nc.softmax(z.data) - np.eye(5)[3]
    out.append(_check("CE gradient identity", float(np.abs(z.grad - expected).max()), 1e-12))

    theta = Tensor(rng.normal(size=6), requires_grad=True, name="theta")
    # central differences are exact on a quadratic, so a wide step only trims roundoff
    rep = nc.grad_check(lambda: nc.sum_all(nc.mul(theta, theta)), {"theta": theta}, h=1e-3)
    out.append(_check("quadratic grad check", rep.max_rel_diff, 1e-9))
    bad = nc.grad_check(lambda: nc.sum_all(nc.mul(theta, theta)), {"theta": theta},
                        analytic={"theta": 2 * theta.data + 0.5})
    out.append(Check("corrupted gradient flagged", bad.max_rel_diff > 1e-2, f"{bad.max_rel_diff:.3g} > 0.01"))

    X = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="X")
    W = Tensor(rng.normal(size=(4, 2)), requires_grad=True, name="W")
    rep = nc.grad_check(lambda: nc.sum_all(nc.sigmoid(nc.matmul(X, W))), {"X": X, "W": W})
    out.append(_check("sigmoid chain grad check", rep.max_rel_diff, 1e-7))
    return out


def suite_datagen() -> list[Check]:
    task = dg.XorMotifTask(T=32, F=16, n_train=400, n_val=200)
    a, b = dg.gen_dataset(task, 7), dg.gen_dataset(task, 7)
    same = all(x.frames.tobytes() == y.frames.tobytes() and x.label == y.label
               for split in (0, 1) for x, y in zip(a[split], b[split]))
    out = [Check("seeded generation is deterministic", same)]
    for name, split in zip(("train", "val"), a):
        freq = float(np.mean([v.label for v in split]))
        out.append(_check(f"{name} labels balanced", abs(freq - 0.5), 0.05))

    rng = np.random.default_rng(3)
    starts = [c.start for c in dg.sample_clips(a[0][0], 2000, 8, rng)]
    out.append(Check("clip starts in bounds", min(starts) >= 0 and max(starts) <= 24))
    out.append(Check("clip starts cover range", set(starts) == set(range(25))))
    out.append(Check("3 crops on T=16, L=8", dg.crop_starts(16, 8, 3) == [0, 4, 8]))
    out.append(Check("center crop", dg.crop_starts(16, 8, 1) == [4]))

    # the oracle against brute-force enumeration over (start, t_a, t_b)
    T, L = 32, 8
    half = T // 2
    hits = sum((s <= ta < s + L) and (s <= tb < s + L)
               for s in range(T - L + 1) for ta in range(half) for tb in range(half, T))
    brute = 0.5 + 0.5 * hits / ((T - L + 1) * half * half)
    out.append(_check("single-clip Bayes oracle", abs(dg.bayes_single_clip_accuracy(task, L) - brute), 1e-15))
    return out


def suite_memory() -> list[Check]:
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        N, k, d, dp = (int(rng.integers(1, 9)), int(rng.integers(1, 7)),
                       int(rng.integers(1, 17)), int(rng.integers(1, 9)))
        Xs = [rng.uniform(-2, 2, size=(k, d)) for _ in range(N)]
        Wq, Wk, Wv = (rng.uniform(-2, 2, size=(d, dp)) for _ in range(3))
        M = cm.push_associative([_t(x) for x in Xs], _t(Wk), _t(Wv))
        for n in range(N):
            got = cm.pop_associative(M, _t(Xs[n]), _t(Wq)).value.data
            worst = max(worst, float(np.abs(got - cm.attention_oracle(Xs, n, Wq, Wk, Wv)).max()))
    out = [_check("oracle equivalence (100 configs)", worst, 1e-9)]

    worst = 0.0
    for _ in range(20):
        N = int(rng.integers(2, 9))
        Xs = [_t(rng.normal(size=(3, 8))) for _ in range(N)]
        Wk, Wv, Wi = (_t(rng.normal(size=(8, 2))) for _ in range(3))
        perm = [Xs[i] for i in rng.permutation(N)]
        for push in (lambda xs: cm.push_associative(xs, Wk, Wv), lambda xs: cm.push_avgpool(xs, Wi)):
            worst = max(worst, float(np.abs(push(Xs).value.data - push(perm).value.data).max()))
    out.append(_check("push permutation invariance", worst, 1e-12))

    W = _t(rng.normal(size=(16, 4)))
    sizes_ok = all(cm.push_associative([_t(rng.normal(size=(2, 16)))] * N, W, W).size == 16
                   and cm.push_avgpool([_t(rng.normal(size=(2, 16)))] * N, W).size == 4
                   for N in range(1, 65))
    out.append(Check("memory size independent of N (1..64)", sizes_ok))

    X = rng.normal(size=(5, 16))
    M_n = cm.ClipMemory(_t(rng.uniform(-2, 2, size=(5, 4))))
    W_O = rng.uniform(-2, 2, size=(4, 16))
    gated = cm.infuse_gating(_t(X), M_n, _t(W_O)).data
    bounded = (np.all(np.sign(gated) == np.sign(X)) and np.all(np.abs(X) <= np.abs(gated))
               and np.all(np.abs(gated) <= 2 * np.abs(X)))
    out.append(Check("gating bounds and sign preservation", bool(bounded)))
    out.append(Check("zero W_O gives 1.5x", np.array_equal(
        cm.infuse_gating(_t(X), M_n, _t(np.zeros((4, 16)))).data, 1.5 * X)))
    return out


def _pipeline_case(variant: str, infusion: str, N: int = 3, seed: int = 5):
    cfg = RunConfig(seed=seed)
    cfg.cm.variant, cfg.cm.infusion = variant, infusion
    cfg.train.N = N
    net = Network.init(cfg)
    # a nonzero W_O so every memory weight receives gradient
    net.cm.W_O.data[...] = np.random.default_rng([seed, 9]).normal(size=net.cm.W_O.shape)
    task = dg.XorMotifTask(n_train=2, n_val=1)
    video = dg.gen_dataset(task, seed)[0][0]
    clips = dg.sample_clips(video, N, cfg.train.L, np.random.default_rng(seed))
    frames = np.stack([c.frames(video) for c in clips])[None]
    return cfg, net, video, frames


def suite_grad() -> list[Check]:
    out = []
    for variant in cm.VARIANTS:
        for infusion in cm.INFUSIONS:
            cfg, net, video, frames = _pipeline_case(variant, infusion)
            params = net.named_parameters()
            rep = nc.grad_check(lambda: video_loss(net.clip_logits(frames), video.label, 1.0), params)
            n = sum(p.size for p in params.values())
            out.append(_check(f"{variant}+{infusion} pipeline ({n} coords)", rep.max_rel_diff, 1e-5))
    return out


def suite_strategy() -> list[Check]:
    out = []
    task = dg.XorMotifTask(n_train=6, n_val=1)
    videos = dg.gen_dataset(task, 4)[0][:3]
    for variant, infusion in (("associative", "gating"), ("associative", "residual"), ("avgpool", "gating")):
        for N in (1, 3, 5):
            cfg = RunConfig(seed=N)
            cfg.cm.variant, cfg.cm.infusion = variant, infusion
            cfg.train.N = N
            net = Network.init(cfg)
            net.cm.W_O.data[...] = np.random.default_rng(N).normal(size=net.cm.W_O.shape)
            a = train_step_batch_reduction(videos, net, cfg, np.random.default_rng(77))
            b = train_step_multi_iteration(videos, net, cfg, np.random.default_rng(77))
            g = max(float(np.abs(a.grads[k] - b.grads[k]).max()) for k in a.grads)
            tag = f"{variant}+{infusion} N={N}"
            out.append(_check(f"{tag} loss", abs(a.loss - b.loss), 1e-12))
            out.append(_check(f"{tag} grads", g, 1e-9))
    return out


def suite_flops() -> list[Check]:
    rng = np.random.default_rng(99)
    mismatches = []
    for _ in range(20):
        N, k, dp = int(rng.integers(1, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 9))
        d = dp * int(rng.integers(1, 5))
        params = cm.CMParams.init(rng, d, d // dp)
        with nc.count_flops() as counter:
            cm.collaborate(_t(rng.normal(size=(N, k, d))), params)
        if counter.multiply_adds != cm.flops_cm(N, k, d, dp):
            mismatches.append((N, k, d, dp, counter.multiply_adds))
    out = [Check("counter equals formula (20 shapes)", not mismatches, str(mismatches[:3]))]
    out.append(Check("hand count N=k=d=d'=1", cm.flops_cm(1, 1, 1, 1) == 7))
    lin = all(cm.flops_cm(2 * N, 3, 16, 4) == 2 * cm.flops_cm(N, 3, 16, 4) for N in range(1, 33))
    out.append(Check("count(2N) = 2 count(N)", lin))
    return out


def suite_io() -> list[Check]:
    out = []
    task = dg.XorMotifTask(T=16, F=8, n_train=10, n_val=4)
    train, _ = dg.gen_dataset(task, 1)
    net = Network.init(RunConfig())
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.cmvd"
        dg.write_dataset(path, train)
        back, _ = dg.read_dataset(path)
        out.append(Check("CMVD1 round trip", all(
            a.frames.tobytes() == b.frames.tobytes() and a.label == b.label for a, b in zip(train, back))))
        ck = Path(tmp) / "m.ck"
        save_checkpoint(ck, net.named_parameters())
        values = load_checkpoint(ck)
        out.append(Check("CMCK1 round trip", all(
            values[n].tobytes() == p.data.tobytes() for n, p in net.named_parameters().items())))
    return out


SUITES: dict[str, Callable[[], list[Check]]] = {
    "numcore": suite_numcore,
    "datagen": suite_datagen,
    "memory": suite_memory,
    "grad": suite_grad,
    "strategy": suite_strategy,
    "flops": suite_flops,
    "io": suite_io,
}


class UnknownSuite(KeyError):
    pass


def run_suite(name: str) -> SuiteResult:
    if name not in SUITES:
        raise UnknownSuite(name)
    res = SuiteResult(name)
    t0 = time.perf_counter()
    try:
        res.checks = SUITES[name]()
    except Exception as exc:  # a crashing suite is a failing suite
        res.error = f"{type(exc).__name__}: {exc}"
    res.seconds = time.perf_counter() - t0
    return res


def run(suite: str) -> list[SuiteResult]:
    if suite == "all":
        return [run_suite(n) for n in SUITES]
    return [run_suite(suite)]


def format_results(results: list[SuiteResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"[{'PASS' if r.ok else 'FAIL'}] {r.name} ({r.seconds:.1f}s)")
        if r.error:
            lines.append(f"    error: {r.error}")
        for c in r.checks:
            lines.append(f"    {'ok  ' if c.ok else 'FAIL'} {c.name}" + (f"  [{c.detail}]" if c.detail else ""))
    passed = sum(r.ok for r in results)
    lines.append(f"{passed}/{len(results)} suites passed")
    return "\n".join(lines)
