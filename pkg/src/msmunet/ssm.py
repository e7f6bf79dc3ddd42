"""Structured state-space machinery.

The continuous system h' = A h + B x, y = C h is discretised with a
zero-order hold and evaluated either as a left-to-right recurrence (valid for
input-dependent, "selective" parameters) or, when the parameters are constant
over time, as a causal convolution with the kernel K_j = C Ā^j B̄.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import LayerNorm, Linear, Module
from .optim import Param
from .tensor import Tensor, as_tensor, make_node, pad, silu, softplus, split, unbroadcast

_SERIES_CUTOFF = 1e-6


@dataclass
class SsmParams:
    """Diagonal SSM parameters.

    ``log_neg_A`` stores log(-A) so the decoded A is strictly negative.  For a
    time-invariant system ``B``/``C`` are (D, N) and ``delta`` is (D,); selective
    systems carry per-timestep (batch, L, D, N) or (batch, L, N) projections
    and a (batch, L, D) ``delta``.
    """

    log_neg_A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: np.ndarray

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.log_neg_A)

    @property
    def state_size(self) -> int:
        return self.log_neg_A.shape[-1]

    @property
    def time_invariant(self) -> bool:
        return self.delta.ndim == 1 and self.B.ndim == 2 and self.C.ndim == 2

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, n: int, dt_range=(1e-3, 1e-1)) -> "SsmParams":
        """Stable random time-invariant parameters (S4D-real style A)."""
        log_neg_A = np.log(np.tile(np.arange(1, n + 1, dtype=float), (d, 1))) + rng.normal(0, 0.1, (d, n))
        delta = np.exp(rng.uniform(math.log(dt_range[0]), math.log(dt_range[1]), d))
        return cls(log_neg_A, rng.normal(size=(d, n)), rng.normal(size=(d, n)), delta)


def _zoh_factor(delta: np.ndarray, A: np.ndarray):
    """phi = (exp(ΔA) - 1)/A and its partial derivative with respect to A."""
    x = delta * A
    small = np.abs(x) < _SERIES_CUTOFF
    safe_A = np.where(small, 1.0, A)
    phi = np.where(small, delta * (1.0 + 0.5 * x), np.expm1(x) / safe_A)
    tiny = np.abs(x) < 1e-4
    safe_x = np.where(tiny, 1.0, x)
    ex = np.exp(x)
    dphi_dA = np.where(
        tiny,
        delta**2 * (0.5 + x / 3.0 + x * x / 8.0),
        delta**2 * (safe_x * ex - np.expm1(safe_x)) / safe_x**2,
    )
    return phi, dphi_dA


def zoh_discretize(A, B, delta):
    """Zero-order-hold discretisation of a diagonal system, elementwise.

    Returns ``(A_bar, B_bar)`` with A_bar = exp(ΔA) and
    B_bar = (ΔA)^-1 (exp(ΔA) - 1) ΔB, falling back to the series limit ΔB
    when |ΔA| is below 1e-6.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0):
        raise ValueError("zoh_discretize: delta must be strictly positive")
    phi, _ = _zoh_factor(delta, A)
    return np.exp(delta * A), phi * B


def _as_state_view(arr: np.ndarray, batch: int, length: int, d: int, n: int) -> np.ndarray:
    """View a B or C projection as broadcastable to (batch, L, D, N)."""
    if arr.ndim == 2:
        if arr.shape != (d, n):
            raise ValueError(f"time-invariant projection must be (D, N) = {(d, n)}, got {arr.shape}")
        return arr[None, None]
    if arr.ndim == 3:
        if arr.shape != (batch, length, n):
            raise ValueError(f"selective projection must be (batch, L, N) = {(batch, length, n)}, got {arr.shape}")
        return arr[:, :, None, :]
    if arr.ndim == 4:
        return arr
    raise ValueError(f"unsupported projection rank {arr.ndim}")


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tensor:
    """Run h_t = Ā_t h_{t-1} + B̄_t u_t, y_t = C_t·h_t from h_0 = 0.

    u: (batch, L, D); delta: broadcastable to (batch, L, D); A: (D, N);
    B, C: (D, N), (batch, L, N) or (batch, L, D, N).  Differentiable in every
    argument; the backward pass runs the adjoint recurrence right to left.
    """
    u, delta, A, B, C = (as_tensor(t) for t in (u, delta, A, B, C))
    if u.ndim != 3:
        raise ValueError(f"selective_scan: input must be (batch, L, D), got {u.shape}")
    bsz, length, d = u.shape
    if length == 0:
        raise ValueError("selective_scan: empty sequence")
    if A.ndim != 2 or A.shape[0] != d:
        raise ValueError(f"selective_scan: A must be (D, N) with D = {d}, got {A.shape}")
    n = A.shape[1]
    delta_full = np.broadcast_to(delta.data, (bsz, length, d))
    if np.any(delta_full <= 0):
        raise ValueError("selective_scan: delta must be strictly positive")
    b4 = _as_state_view(B.data, bsz, length, d, n)
    c4 = _as_state_view(C.data, bsz, length, d, n)

    d4 = delta_full[..., None]
    a_bar = np.exp(d4 * A.data)
    phi, dphi_dA = _zoh_factor(d4, A.data)
    b_bar = phi * b4
    drive = b_bar * u.data[..., None]
    hs = np.empty((bsz, length, d, n), dtype=u.data.dtype)
    h = np.zeros((bsz, d, n), dtype=u.data.dtype)
    for t in range(length):
        h = a_bar[:, t] * h + drive[:, t]
        hs[:, t] = h
    y = np.einsum("bldn,bldn->bld", hs, np.broadcast_to(c4, hs.shape))

    def backward(gy):
        gh_all = np.empty_like(hs)
        c_full = np.broadcast_to(c4, hs.shape)
        carry = np.zeros((bsz, d, n), dtype=hs.dtype)
        for t in range(length - 1, -1, -1):
            gh = gy[:, t, :, None] * c_full[:, t] + carry
            gh_all[:, t] = gh
            carry = a_bar[:, t] * gh
        if C.requires_grad:
            gc = unbroadcast(gy[..., None] * hs, c4.shape)
            C._accumulate(gc.reshape(C.shape))
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        g_abar = gh_all * h_prev
        if u.requires_grad:
            u._accumulate((gh_all * b_bar).sum(axis=-1))
        g_bbar = gh_all * u.data[..., None]
        if B.requires_grad:
            gb = unbroadcast(g_bbar * phi, b4.shape)
            B._accumulate(gb.reshape(B.shape))
        g_phi = g_bbar * b4
        if delta.requires_grad:
            g_delta = (g_abar * a_bar * A.data + g_phi * a_bar).sum(axis=-1)
            delta._accumulate(unbroadcast(g_delta, delta.shape))
        if A.requires_grad:
            ga = g_abar * a_bar * d4 + g_phi * dphi_dA
            A._accumulate(ga.sum(axis=(0, 1)))

    return make_node(y, (u, delta, A, B, C), backward, "selective_scan")


def scan_recurrence(x, params: SsmParams) -> Tensor:
    """Evaluate the discrete recurrence for ``params`` over x (batch, L, D)."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError(f"scan_recurrence: need a non-empty (batch, L, D) input, got {x.shape}")
    A = Tensor(params.A)
    delta = np.asarray(params.delta, dtype=float)
    if delta.ndim == 1:
        delta = delta[None, None, :]
    return selective_scan(x, Tensor(delta), A, Tensor(params.B), Tensor(params.C))


def ssm_kernel(params: SsmParams, length: int) -> np.ndarray:
    """Convolution kernel K_j = C Ā^j B̄ for j < length, shape (length, D)."""
    if not params.time_invariant:
        raise ValueError("ssm_kernel: the kernel form needs time-invariant parameters")
    a_bar, b_bar = zoh_discretize(params.A, params.B, params.delta[:, None])
    powers = a_bar[None] ** np.arange(length)[:, None, None]
    return np.einsum("dn,ldn,dn->ld", params.C, powers, b_bar)


def ssm_convolve(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Causal convolution y_t = Σ_{j<=t} K_j x_{t-j} along axis 1 of (batch, L, D)."""
    x = np.asarray(x, dtype=float)
    length = x.shape[1]
    y = np.zeros_like(x)
    for j in range(length):
        y[:, j:, :] += kernel[j] * x[:, : length - j, :]
    return y


@dataclass
class SequenceView:
    tokens: Tensor
    origin_shape: tuple[int, int]


def image_to_sequence(x: Tensor) -> SequenceView:
    """Row-major raster flattening (B,C,H,W) -> (B, H·W, C)."""
    b, c, h, w = x.shape
    return SequenceView(x.reshape(b, c, h * w).transpose(0, 2, 1), (h, w))


def sequence_to_image(view: SequenceView | Tensor, origin_shape: tuple[int, int] | None = None) -> Tensor:
    if isinstance(view, SequenceView):
        tokens = view.tokens
        if origin_shape is not None and tuple(origin_shape) != tuple(view.origin_shape):
            raise ValueError(f"origin shape {origin_shape} does not match recorded {view.origin_shape}")
        origin_shape = view.origin_shape
    else:
        tokens = view
    if origin_shape is None:
        raise ValueError("sequence_to_image needs the original (H, W)")
    h, w = origin_shape
    b, length, c = tokens.shape
    if length != h * w:
        raise ValueError(f"sequence length {length} does not match origin shape {h}x{w}")
    return tokens.transpose(0, 2, 1).reshape(b, c, h, w)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class MambaBlock(Module):
    """Pre-norm residual selective-SSM block on (batch, L, D) tokens."""

    def __init__(
        self,
        rng: np.random.Generator,
        d_model: int,
        state_size: int = 16,
        expand: int = 2,
        conv_width: int = 4,
        dt_range: tuple[float, float] = (1e-3, 1e-1),
    ):
        e = expand * d_model
        self.d_inner = e
        self.state_size = state_size
        self.dt_rank = max(1, math.ceil(d_model / 16))
        self.conv_width = conv_width
        self.norm = LayerNorm(d_model)
        self.in_proj = Linear(rng, d_model, 2 * e, bias=False)
        self.conv_weight = Param(rng.uniform(-1, 1, (conv_width, e)) / math.sqrt(conv_width))
        self.conv_bias = Param(np.zeros(e))
        self.x_proj = Linear(rng, e, self.dt_rank + 2 * state_size, bias=False)
        self.dt_proj = Linear(rng, self.dt_rank, e)
        dt = np.exp(rng.uniform(math.log(dt_range[0]), math.log(dt_range[1]), e))
        self.dt_proj.bias.assign(inverse_softplus(dt))
        self.A_log = Param(np.log(np.tile(np.arange(1, state_size + 1, dtype=float), (e, 1))))
        self.D = Param(np.ones(e))
        self.out_proj = Linear(rng, e, d_model, bias=False)

    def causal_conv(self, x: Tensor) -> Tensor:
        length = x.shape[1]
        k = self.conv_width
        xp = pad(x, ((0, 0), (k - 1, 0), (0, 0)))
        out = self.conv_bias
        for j in range(k):
            out = out + xp[:, j : j + length, :] * self.conv_weight[j]
        return out

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(x)
        stream, gate = split(self.in_proj(h), [self.d_inner, self.d_inner], axis=-1)
        stream = silu(self.causal_conv(stream))
        dt_low, b_sel, c_sel = split(
            self.x_proj(stream), [self.dt_rank, self.state_size, self.state_size], axis=-1
        )
        delta = softplus(self.dt_proj(dt_low))
        A = -self.A_log.exp()
        y = selective_scan(stream, delta, A, b_sel, c_sel) + stream * self.D
        y = y * silu(gate)
        return x + self.out_proj(y)


class MambaBranch(Module):
    """Image -> token sequence -> stacked Mamba blocks -> image.

    ``scan='bidirectional'`` adds a second stack that reads the raster in
    reverse; the two outputs are summed.
    """

    def __init__(self, rng, width: int, layers: int, state_size: int, scan: str = "forward"):
        if scan not in ("forward", "bidirectional"):
            raise ValueError(f"unknown scan mode {scan!r}")
        self.blocks = [MambaBlock(rng, width, state_size) for _ in range(layers)]
        self.reverse_blocks = (
            [MambaBlock(rng, width, state_size) for _ in range(layers)] if scan == "bidirectional" else []
        )

    def forward(self, x: Tensor) -> Tensor:
        view = image_to_sequence(x)
        tokens = view.tokens
        for blk in self.blocks:
            tokens = blk(tokens)
        if self.reverse_blocks:
            rev = view.tokens[:, ::-1, :]
            for blk in self.reverse_blocks:
                rev = blk(rev)
            tokens = tokens + rev[:, ::-1, :]
        return sequence_to_image(SequenceView(tokens, view.origin_shape))


__all__ = [
    "SsmParams",
    "bench_scan_vs_kernel",
    "SequenceView",
    "MambaBlock",
    "MambaBranch",
    "image_to_sequence",
    "scan_recurrence",
    "selective_scan",
    "sequence_to_image",
    "ssm_convolve",
    "ssm_kernel",
    "zoh_discretize",
]


def bench_scan_vs_kernel(lengths=(16, 64, 256, 1024), d: int = 16, n: int = 16, repeats: int = 3, seed: int = 0):
    """Wall-clock of the recurrent scan against kernel construction plus causal
    convolution, per sequence length."""
    import time

    rng = np.random.default_rng(seed)
    params = SsmParams.random(rng, d, n)
    rows = []
    for length in lengths:
        x = rng.normal(size=(1, length, d))
        best_scan = best_kernel = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            y_scan = scan_recurrence(x, params).data
            t1 = time.perf_counter()
            y_conv = ssm_convolve(x, ssm_kernel(params, length))
            t2 = time.perf_counter()
            best_scan, best_kernel = min(best_scan, t1 - t0), min(best_kernel, t2 - t1)
        rows.append({"length": length, "scan_s": best_scan, "kernel_s": best_kernel,
                     "max_abs_diff": float(np.max(np.abs(y_scan - y_conv)))})
    return rows
