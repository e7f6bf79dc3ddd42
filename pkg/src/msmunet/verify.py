"""Self-check suite: gradient checks, equivalence oracles and shape laws.

Each check returns ``(passed, detail)``.  :func:`run_suite` runs them all
and never raises; a crashing check counts as a failure.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from . import config as config_io
from . import data, losses, nnops, ssm
from . import tensor as T
from .gradcheck import check_gradients
from .model import (
    AttentionGate,
    DBMSMUNet,
    DilatedReparamConv,
    MSMMStage,
    ModelConfig,
    apply_merged_drb,
    expected_stage_shape,
    merge_drb,
)
from .optim import LrSchedule, cosine_lr
from .tensor import Tensor, no_grad

GRAD_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}\t{self.name}\t{self.detail}\t{self.seconds:.2f}s"


# -- gradient checks ------------------------------------------------------------


def _leaf(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is not None:
        return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _project(y: Tensor, rng) -> Tensor:
    return (y * Tensor(rng.normal(size=y.shape))).sum()


def _away_from_zero(rng, *shape) -> Tensor:
    v = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(v, requires_grad=True)


def _op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]]:
    def unary(fn, make=None):
        def build(rng):
            x = make(rng) if make else _leaf(rng, 3, 4)
            w = rng.normal(size=x.shape)
            return (lambda: (fn(x) * Tensor(w)).sum()), [x]

        return build

    def binary(fn, shape_b=(3, 4), positive_b=False):
        def build(rng):
            a = _leaf(rng, 3, 4)
            b = _leaf(rng, *shape_b, lo=0.5, hi=2.0) if positive_b else _leaf(rng, *shape_b)
            w = rng.normal(size=(3, 4))
            return (lambda: (fn(a, b) * Tensor(w)).sum()), [a, b]

        return build

    def conv(stride=1, padding=1, dilation=1, depthwise=False):
        def build(rng):
            x = _leaf(rng, 2, 3, 7, 7)
            wshape = (3, 1, 3, 3) if depthwise else (4, 3, 3, 3)
            w = _leaf(rng, *wshape)
            b = _leaf(rng, wshape[0])
            groups = 3 if depthwise else 1

            def f():
                y = nnops.conv2d(x, w, b, stride, padding, dilation, groups)
                return _project(y, np.random.default_rng(1))

            return f, [x, w, b]

        return build

    def deform(rng):
        x = _leaf(rng, 1, 2, 6, 6)
        w = _leaf(rng, 3, 2, 3, 3)
        b = _leaf(rng, 3)
        # offsets kept away from integer lattice points where bilinear weights kink
        off = Tensor(rng.uniform(0.1, 0.4, size=(1, 18, 6, 6)) * rng.choice([-1, 1], size=(1, 18, 6, 6)),
                     requires_grad=True)
        return (lambda: _project(nnops.deformable_conv2d(x, w, off, b), np.random.default_rng(2))), [x, w, off, b]

    def scan(rng):
        u = _leaf(rng, 2, 5, 3)
        delta = _leaf(rng, 2, 5, 3, lo=0.05, hi=0.5)
        A = Tensor(-rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        B = _leaf(rng, 2, 5, 4)
        C = _leaf(rng, 2, 5, 4)
        return (lambda: _project(ssm.selective_scan(u, delta, A, B, C), np.random.default_rng(3))), [u, delta, A, B, C]

    def tmax(rng):
        x = Tensor(rng.permutation(12).reshape(3, 4) * 0.3, requires_grad=True)
        w = rng.normal(size=(3,))
        return (lambda: (T.tmax(x, axis=1) * Tensor(w)).sum()), [x]

    def softmax(rng):
        x = _leaf(rng, 2, 3, 4)
        w = rng.normal(size=x.shape)
        return (lambda: (T.softmax(x, axis=1) * Tensor(w)).sum()), [x]

    def matmul(rng):
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
        w = rng.normal(size=(2, 3, 5))
        return (lambda: ((a @ b) * Tensor(w)).sum()), [a, b]

    def shaping(rng):
        x = _leaf(rng, 2, 3, 4)
        w = rng.normal(size=(3, 8))

        def f():
            y = T.transpose(x, (1, 0, 2)).reshape(3, 8)
            parts = T.split(y, [3, 5], axis=1)
            z = T.concat([parts[1], parts[0]], axis=1)
            z = T.pad(z, [(0, 0), (0, 0)])[:, ::-1]
            return (z * Tensor(w)).sum() + x[1, 2:, ::2].sum() * 0.5

        return f, [x]

    def layer_norm(rng):
        x = _leaf(rng, 2, 4, 3, 3)
        g, s = _leaf(rng, 4), _leaf(rng, 4)
        return (lambda: _project(nnops.layer_norm(x, g, s, axis=1), np.random.default_rng(4))), [x, g, s]

    def upsample(rng):
        x = _leaf(rng, 1, 2, 3, 4)
        return (lambda: _project(nnops.upsample_bilinear(x, 2), np.random.default_rng(5))), [x]

    def convt(rng):
        x, w, b = _leaf(rng, 1, 3, 3, 3), _leaf(rng, 3, 2, 2, 2), _leaf(rng, 2)
        return (lambda: _project(nnops.conv_transpose2x2(x, w, b), np.random.default_rng(6))), [x, w, b]

    return {
        "add": binary(T.add, (4,)),
        "sub": binary(T.sub, (3, 1)),
        "mul": binary(T.mul),
        "div": binary(T.div, positive_b=True),
        "power": unary(lambda x: T.power(x, 3.0)),
        "matmul": matmul,
        "relu": unary(T.relu, lambda r: _away_from_zero(r, 3, 4)),
        "sigmoid": unary(T.sigmoid),
        "silu": unary(T.silu),
        "softplus": unary(T.softplus),
        "exp": unary(T.exp),
        "log": unary(T.log, lambda r: _leaf(r, 3, 4, lo=0.5, hi=2.0)),
        "clip": unary(lambda x: T.clip(x, -0.7, 0.7), lambda r: _away_from_zero(r, 3, 4)),
        "softmax": softmax,
        "sum_mean": unary(lambda x: T.tsum(x, axis=0, keepdims=True) * T.mean(x)),
        "max": tmax,
        "reshape_transpose_index_concat_split_pad": shaping,
        "conv2d": conv(),
        "conv2d_strided": conv(stride=2, padding=0),
        "conv2d_depthwise_dilated": conv(padding=2, dilation=2, depthwise=True),
        "conv_transpose2x2": convt,
        "deformable_conv2d": deform,
        "layer_norm": layer_norm,
        "upsample_bilinear": upsample,
        "selective_scan": scan,
    }


def _params_sample(module, rng, count: int) -> list:
    params = module.parameters()
    idx = sorted(rng.choice(len(params), size=min(count, len(params)), replace=False))
    return [params[i] for i in idx]


def _block_cases() -> dict[str, Callable]:
    def mamba(rng):
        blk = ssm.MambaBlock(rng, 4, state_size=3)
        x = _leaf(rng, 1, 6, 4)
        return (lambda: _project(blk(x), np.random.default_rng(7))), [x] + blk.parameters()

    def stage(rng):
        cfg = ModelConfig(base_width=4, state_size=2, mamba_layers_per_branch=1)
        st = MSMMStage(rng, 4, 8, downsample=True, config=cfg)
        for conv in st.deform:  # non-zero offsets so the sampling path is exercised
            conv.offset_conv.weight.assign(rng.normal(0, 0.05, conv.offset_conv.weight.shape))
        x = _leaf(rng, 1, 4, 4, 4)
        return (lambda: _project(st(x), np.random.default_rng(8))), [x] + _params_sample(st, rng, 10)

    def gate(rng):
        g = AttentionGate(rng, 3)
        x = _leaf(rng, 1, 3, 4, 4)
        return (lambda: _project(g(x), np.random.default_rng(9))), [x] + g.parameters()

    def drb(rng):
        d = DilatedReparamConv(rng, 2, 7)
        for s in d.scales:
            s.assign(rng.normal(1.0, 0.2, s.shape))
        x = _leaf(rng, 1, 2, 8, 8)
        return (lambda: _project(d(x), np.random.default_rng(10))), [x] + d.parameters()

    def dice(rng):
        z = _leaf(rng, 2, 1, 5, 5)
        t = (rng.random((2, 1, 5, 5)) < 0.4).astype(float)
        return (lambda: losses.dice_loss(T.sigmoid(z), t)), [z]

    def bce(rng):
        z = _leaf(rng, 2, 1, 5, 5)
        e = (rng.random((2, 1, 5, 5)) < 0.3).astype(float)
        return (lambda: losses.edge_bce(T.sigmoid(z), e)), [z]

    return {
        "mamba_block": mamba,
        "msmm_stage": stage,
        "attention_gate": gate,
        "drb": drb,
        "dice_loss": dice,
        "edge_bce": bce,
    }


def grad_check(name: str, build, seed: int = 0, max_entries: int = 8) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    fn, tensors = build(rng)
    err = check_gradients(fn, tensors, h=1e-5, max_entries=max_entries, rng=np.random.default_rng(seed + 1))
    return err <= GRAD_TOL, f"max rel err {err:.2e} (tol {GRAD_TOL:g})"


# -- oracles -------------------------------------------------------------------


def check_ssm_equivalence(instances: int = 100, lengths=(8, 64, 256), seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        length = lengths[i % len(lengths)]
        n = int(rng.integers(1, 17))
        d = int(rng.integers(1, 5))
        params = ssm.SsmParams.random(rng, d, n)
        x = rng.normal(size=(1, length, d))
        with no_grad():
            y_scan = ssm.scan_recurrence(x, params).data
        y_conv = ssm.ssm_convolve(x, ssm.ssm_kernel(params, length))
        worst = max(worst, float(np.max(np.abs(y_scan - y_conv))))
    return worst <= 1e-8, f"max abs diff {worst:.2e} over {instances} instances"


def check_zoh_scalar() -> tuple[bool, str]:
    a_bar, b_bar = ssm.zoh_discretize(np.array(-1.0), np.array(1.0), np.array(1.0))
    err = max(abs(float(a_bar) - math.exp(-1)), abs(float(b_bar) - (1 - math.exp(-1))))
    return err <= 1e-12, f"max err {err:.1e}"


def zoh_order_slope(A: float = -1.3) -> float:
    deltas = 0.1 * 0.5 ** np.arange(8)
    errs = [abs(float(ssm.zoh_discretize(np.array(A), np.array(1.0), np.array(d))[0]) - (1 + d * A)) for d in deltas]
    return float(np.polyfit(np.log(deltas), np.log(errs), 1)[0])


def check_zoh_order() -> tuple[bool, str]:
    slope = zoh_order_slope()
    return slope >= 1.9, f"fitted slope {slope:.3f}"


def check_deformable_zero_offsets() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 8, 9)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=4))
    with no_grad():
        got = nnops.deformable_conv2d(x, w, Tensor(np.zeros((2, 18, 8, 9))), b).data
        ref = nnops.conv2d(x, w, b, padding=1).data
    err = float(np.max(np.abs(got - ref)))
    return err <= 1e-12, f"max abs diff {err:.1e}"


def check_drb_merge() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in (5, 7, 9):
        d = DilatedReparamConv(rng, 3, k)
        for s, b in zip(d.scales, d.shifts):
            s.assign(rng.normal(1.0, 0.3, s.shape))
            b.assign(rng.normal(0.0, 0.3, b.shape))
        x = Tensor(rng.normal(size=(2, 3, 12, 12)))
        with no_grad():
            ref = d(x).data
            got = apply_merged_drb(x, *merge_drb(d)).data
        worst = max(worst, float(np.max(np.abs(ref - got))))
    return worst <= 1e-6, f"max abs diff {worst:.1e} for k in (5, 7, 9)"


def check_shape_law(size: int = 224) -> tuple[bool, str]:
    cfg = ModelConfig.paper_scale()
    model = DBMSMUNet(cfg, seed=0)
    with no_grad():
        feats = model.encode(np.zeros((1, 1, size, size)))
    got = [tuple(f.tensor.shape[1:]) for f in feats[1:]]
    want = [expected_stage_shape(cfg, i, size, size) for i in range(1, 5)]
    literal = [(64, 56, 56), (128, 28, 28), (256, 14, 14), (512, 7, 7)] if size == 224 else want
    return got == want == literal, " -> ".join(f"{c}x{h}x{w}" for c, h, w in got)


ABLATION_FLAGS = ("use_eep", "use_mld", "use_ads", "multiscale_mamba")


def ablation_configs(base: ModelConfig) -> list[ModelConfig]:
    out = []
    for bits in itertools.product((True, False), repeat=len(ABLATION_FLAGS)):
        kw = base.as_dict()
        kw.update(dict(zip(ABLATION_FLAGS, bits)))
        out.append(ModelConfig(**kw))
    return out


def check_ablations(size: int = 64, base: ModelConfig | None = None) -> tuple[bool, str]:
    base = base or ModelConfig(base_width=8, state_size=4, mamba_layers_per_branch=1)
    rng = np.random.default_rng(0)
    image = rng.random((1, 1, size, size))
    mask = np.zeros((1, 1, size, size))
    mask[..., size // 4 : size // 2, size // 4 : size // 2] = 1
    edge = data.canny_edges(mask[0, 0])[None, None].astype(float)
    bad = []
    for cfg in ablation_configs(base):
        model = DBMSMUNet(cfg, seed=0)
        with no_grad():
            out = model(image)
            _, rep = losses.total_loss(out, mask, edge, cfg.ads_weights)
        ok = out.area_logits.shape == (1, cfg.num_classes, size, size) and math.isfinite(rep.total)
        ok &= (out.edge_prob is not None) == cfg.use_eep
        ok &= (len(out.aux_area) == 3) == cfg.use_ads
        if not ok:
            bad.append(str({k: getattr(cfg, k) for k in ABLATION_FLAGS}))
    return not bad, f"16 combinations at {size}x{size}" + (f"; failing: {bad}" if bad else "")


def check_edge_bce_bruteforce() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, size=(2, 1, 4, 5))
    e = (rng.random((2, 1, 4, 5)) < 0.3).astype(float)
    with no_grad():
        got = losses.edge_bce(Tensor(p), e).item()
    total = 0.0
    for b in range(2):
        w0 = e[b].sum() / e[b].size
        w1 = 1.0 - w0
        acc = 0.0
        for idx in np.ndindex(e[b].shape):
            acc += w0 * e[b][idx] * math.log(p[b][idx]) + w1 * (1 - e[b][idx]) * math.log(1 - p[b][idx])
        total += -acc / e[b].size
    err = abs(got - total / 2)
    return err <= 1e-10, f"abs diff {err:.1e}"


def check_edge_weights() -> tuple[bool, str]:
    e = np.zeros((1, 1, 4, 4))
    e[0, 0, 0, :] = 1
    w0, w1 = losses.edge_weights(e)
    ok = float(w0[0]) == 0.25 and float(w1[0]) == 0.75
    return ok, f"w0={float(w0[0])}, w1={float(w1[0])}"


def check_aux_weighting() -> tuple[bool, str]:
    maps = [Tensor(np.zeros(1)) for _ in range(3)]
    vals = iter([1.0, 0.0, 0.0])
    got = losses.aux_loss(maps, [None] * 3, (0.6, 0.3, 0.1), lambda m, t: Tensor(next(vals))).item()
    return got == 0.6, f"components (1,0,0) -> {got}"


def check_total_decomposition() -> tuple[bool, str]:
    cfg = ModelConfig(base_width=8, state_size=4, mamba_layers_per_branch=1)
    model = DBMSMUNet(cfg, seed=0)
    sl = data.generate_phantom(data.PhantomSpec(seed=3))
    images, masks, edges = data.stack_batch([sl])
    with no_grad():
        loss, rep = losses.total_loss(model(images), masks, edges)
    parts = rep.area + rep.aux_area + rep.edge + rep.aux_edge
    return loss.item() == parts == rep.total, f"total {loss.item():.6f} = sum of four terms"


def check_hu_window() -> tuple[bool, str]:
    got = data.hu_window(np.array([-100.0, 240.0, 70.0, -500.0]))
    ok = got.tolist() == [0, 255, 128, 0]
    return ok, f"-100,240,70,-500 -> {got.tolist()}"


def check_canny_disk() -> tuple[bool, str]:
    yy, xx = np.indices((64, 64))
    disk = (np.hypot(yy - 31.7, xx - 32.2) <= 20).astype(np.uint8)
    f1 = data.f1_score(data.canny_edges(disk), data.morphological_boundary(disk))
    return f1 >= 0.9, f"F1 {f1:.4f} on a 20 px disk"


def check_lr_trace() -> tuple[bool, str]:
    sched = LrSchedule()
    got = [cosine_lr(sched, e) for e in (0, 16, 32)]
    ok = np.allclose(got, [5e-4, 2.5e-4, 5e-4], rtol=0, atol=1e-15)
    return ok, "epochs 0/16/32 -> " + "/".join(f"{v:.2e}" for v in got)


def check_roundtrips() -> tuple[bool, str]:
    cfg = config_io.TrainConfig(seed=7, swap_edge_weights=True, lr=3.3e-4)
    cfg_ok = config_io.parse(config_io.serialize(cfg)) == cfg
    model = DBMSMUNet(ModelConfig(base_width=8, state_size=4, mamba_layers_per_branch=1), seed=1)
    blob = ckpt_io.encode(config_io.serialize(cfg), {n: p.data for n, p in model.named_parameters()})
    back = ckpt_io.decode(blob)
    ckpt_ok = ckpt_io.encode(back.config_text, back.tensors) == blob
    ckpt_ok &= all(np.array_equal(back.tensors[n], p.data.astype(np.float32)) for n, p in model.named_parameters())
    return cfg_ok and ckpt_ok, f"config {'ok' if cfg_ok else 'MISMATCH'}, checkpoint {'ok' if ckpt_ok else 'MISMATCH'}"


# -- suite ---------------------------------------------------------------------


def all_checks(include_paper_scale: bool = True) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    checks: list[tuple[str, Callable]] = [
        ("ssm_scan_vs_kernel", check_ssm_equivalence),
        ("zoh_scalar", check_zoh_scalar),
        ("zoh_second_order", check_zoh_order),
    ]
    for name, build in _op_cases().items():
        checks.append((f"grad_{name}", lambda b=build, n=name: grad_check(n, b)))
    for name, build in _block_cases().items():
        checks.append((f"grad_{name}", lambda b=build, n=name: grad_check(n, b, max_entries=4)))
    checks += [
        ("deformable_zero_offsets", check_deformable_zero_offsets),
        ("drb_merge", check_drb_merge),
        ("ablations_construct_and_run", check_ablations),
        ("edge_bce_bruteforce", check_edge_bce_bruteforce),
        ("edge_weights", check_edge_weights),
        ("aux_weighting", check_aux_weighting),
        ("total_loss_decomposition", check_total_decomposition),
        ("hu_window_endpoints", check_hu_window),
        ("canny_vs_morphological_boundary", check_canny_disk),
        ("cosine_lr_trace", check_lr_trace),
        ("config_checkpoint_roundtrip", check_roundtrips),
    ]
    if include_paper_scale:
        checks.append(("shape_law_224", check_shape_law))
    return checks


def run_check(name: str, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crashing check is a failed check
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


def run_suite(include_paper_scale: bool = True, log=None) -> list[CheckResult]:
    results = []
    for name, fn in all_checks(include_paper_scale):
        res = run_check(name, fn)
        if log:
            log(res.line())
        results.append(res)
    return results
