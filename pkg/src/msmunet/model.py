"""The dual-decoder multi-scale Mamba segmentation network.

Stage layout for an H×W input with base width C′ (stem stride 4):

    level 0  stem            H/4  × W/4   C′
    level 1  stage 1         H/4  × W/4   2C′
    level 2  stage 2         H/8  × W/8   4C′
    level 3  stage 3         H/16 × W/16  8C′
    level 4  stage 4         H/32 × W/32  16C′

Each stage doubles the width; stages 2-4 also halve the resolution.  The
edge path and the multi-layer decoder both consume levels 1-4.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import nnops
from .nn import (
    ChannelNorm,
    Conv2d,
    ConvTranspose2x2,
    DeformConv2d,
    Linear,
    Module,
    ResBlock,
    channel_concat,
)
from .optim import Param
from .ssm import MambaBranch
from .tensor import Tensor, concat, relu, sigmoid, silu, softmax

INPUT_MULTIPLE = 32
NUM_STAGES = 4


@dataclass
class ModelConfig:
    base_width: int = 16
    stem_factor: int = 4
    stages: int = 4
    mamba_layers_per_branch: int = 2
    state_size: int = 8
    ads_weights: tuple[float, float, float] = (0.6, 0.3, 0.1)
    use_eep: bool = True
    use_mld: bool = True
    use_ads: bool = True
    multiscale_mamba: bool = True
    num_classes: int = 1
    ffn_ratio: int = 8
    scan: str = "forward"

    def __post_init__(self):
        self.ads_weights = tuple(float(w) for w in self.ads_weights)
        if len(self.ads_weights) != 3 or abs(sum(self.ads_weights) - 1.0) > 1e-9:
            raise ValueError(f"ads_weights must be three values summing to 1, got {self.ads_weights}")
        if self.stages != NUM_STAGES:
            raise ValueError("the reference architecture has exactly 4 stages")
        if self.stem_factor != 4:
            raise ValueError("stem_factor is fixed at 4")
        if self.multiscale_mamba and (2 * self.base_width) % 4:
            raise ValueError(
                f"branch width 2C'/4 is not integral for base_width={self.base_width}; "
                "base_width must be even"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    def width(self, level: int) -> int:
        return (2**level) * self.base_width

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        return cls(**{"base_width": 32, "state_size": 16, **overrides})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def expected_stage_shape(config: ModelConfig, level: int, height: int, width: int) -> tuple[int, int, int]:
    """(channels, rows, cols) of the level-``level`` feature for an H×W input."""
    h1, w1 = height // config.stem_factor, width // config.stem_factor
    if level <= 1:
        return config.width(level), h1, w1
    return config.width(level), h1 // 2 ** (level - 1), w1 // 2 ** (level - 1)


def check_input_size(height: int, width: int) -> None:
    if height % INPUT_MULTIPLE or width % INPUT_MULTIPLE or height <= 0 or width <= 0:
        raise ValueError(
            f"input size {height}x{width} is not supported: height and width must be "
            f"positive multiples of {INPUT_MULTIPLE} (stem stride 4, then three 2x downsamplings)"
        )


@dataclass
class StageFeature:
    tensor: Tensor
    level: int

    def check(self, config: ModelConfig, height: int, width: int) -> "StageFeature":
        want = expected_stage_shape(config, self.level, height, width)
        got = tuple(self.tensor.shape[1:])
        if got != want:
            raise RuntimeError(f"level {self.level} feature has shape {got}, expected {want}")
        return self


@dataclass
class ModelOutputs:
    area_logits: Tensor
    edge_prob: Tensor | None = None
    aux_area: list[Tensor] = field(default_factory=list)
    aux_edge: list[Tensor] = field(default_factory=list)

    def area_prob(self) -> Tensor:
        return logits_to_prob(self.area_logits)


def logits_to_prob(logits: Tensor) -> Tensor:
    """Foreground probability map (B,1,H,W) from one- or multi-class logits."""
    if logits.shape[1] == 1:
        return sigmoid(logits)
    return softmax(logits, axis=1)[:, 1:2]


# -- encoder ------------------------------------------------------------------
class Stem(Module):
    def __init__(self, rng, width: int, factor: int = 4):
        self.factor = factor
        self.conv = Conv2d(rng, 1, width, factor, stride=factor, padding=0)
        self.norm = ChannelNorm(width)

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 1:
            raise ValueError(f"stem expects a (B,1,H,W) image, got {image.shape}")
        check_input_size(image.shape[2], image.shape[3])
        return self.norm(self.conv(image))


class MSMMStage(Module):
    """Patch-merge, then one local residual branch and three deformable-tap
    Mamba branches concatenated back to the stage width."""

    def __init__(self, rng, c_in: int, c_out: int, downsample: bool, config: ModelConfig):
        self.downsample = downsample
        self.multiscale = config.multiscale_mamba
        if downsample:
            self.merge = Conv2d(rng, c_in, c_out, 2, stride=2, padding=0)
        else:
            self.merge = Conv2d(rng, c_in, c_out, 1)
        layers, n = config.mamba_layers_per_branch, config.state_size
        if self.multiscale:
            if c_out % 4:
                raise ValueError(f"stage width {c_out} does not split into 4 equal branches")
            cb = c_out // 4
            self.branch_width = cb
            self.reduce = Conv2d(rng, c_out, cb, 1)
            self.deform = [DeformConv2d(rng, cb, cb) for _ in range(3)]
            self.branches = [MambaBranch(rng, cb, layers, n, config.scan) for _ in range(3)]
            self.local = ResBlock(rng, c_out, cb)
        else:
            self.branch_width = c_out
            self.branches = [MambaBranch(rng, c_out, layers, n, config.scan)]

    def taps(self, merged: Tensor) -> list[Tensor]:
        """Outputs after deformable conv 1, 2 and 3 (receptive fields 3, 5, 7)."""
        h = self.reduce(merged)
        out = []
        for conv in self.deform:
            h = conv(h)
            out.append(h)
        return out

    def forward(self, x: Tensor) -> Tensor:
        merged = self.merge(x)
        if not self.multiscale:
            return self.branches[0](merged)
        globals_ = [branch(tap) for branch, tap in zip(self.branches, self.taps(merged))]
        return channel_concat([self.local(merged)] + globals_)


# -- edge enhancement path ------------------------------------------------------
class AttentionGate(Module):
    """A = σ(conv1x1(ReLU(conv1x1(X) + X))); returns A ⊗ X."""

    def __init__(self, rng, width: int, zero_init: bool = False):
        self.inner = Conv2d(rng, width, width, 1, zero_init=zero_init)
        self.outer = Conv2d(rng, width, width, 1, zero_init=zero_init)

    def gate(self, x: Tensor) -> Tensor:
        return sigmoid(self.outer(relu(self.inner(x) + x)))

    def forward(self, x: Tensor) -> Tensor:
        return self.gate(x) * x


class EdgePath(Module):
    """Top-down gated residual refinement of levels 4→1 with edge heads."""

    def __init__(self, rng, config: ModelConfig):
        widths = [config.width(i) for i in range(1, 5)]
        self.gates = [AttentionGate(rng, w) for w in widths]
        self.local_res = [ResBlock(rng, w, w) for w in widths]
        # res on the deeper refined map, then 1x1 projection to the shallower width
        self.top_res = [ResBlock(rng, widths[i + 1], widths[i + 1]) for i in range(3)]
        self.top_proj = [Conv2d(rng, widths[i + 1], widths[i], 1) for i in range(3)]
        n_heads = 3 if config.use_ads else 1
        self.edge_heads = [Conv2d(rng, widths[i], 1, 1) for i in range(n_heads)]

    def refine(self, feats: list[Tensor]) -> list[Tensor]:
        if len(feats) != 4:
            raise ValueError(f"edge path needs levels 1-4, got {len(feats)} features")
        refined = [None] * 4
        refined[3] = self.local_res[3](self.gates[3](feats[3]))
        for i in (2, 1, 0):
            top = self.top_proj[i](self.top_res[i](refined[i + 1]))
            top = nnops.upsample_bilinear(top, 2)
            refined[i] = top + self.local_res[i](self.gates[i](feats[i]))
        return refined

    def forward(self, feats: list[Tensor], stem_factor: int = 4):
        refined = self.refine(feats)
        logits = [head(r) for head, r in zip(self.edge_heads, refined)]
        edge_prob = sigmoid(nnops.upsample_bilinear(logits[0], stem_factor))
        aux = [sigmoid(l) for l in logits] if len(logits) == 3 else []
        return edge_prob, aux


# -- multi-layer decoder ------------------------------------------------------
DRB_BRANCHES = {
    3: ((3, 1),),
    5: ((5, 1), (3, 2)),
    7: ((7, 1), (3, 3), (3, 2)),
    9: ((9, 1), (5, 2), (3, 4)),
}


def dilate_kernel(kernel: np.ndarray, dilation: int) -> np.ndarray:
    """Insert dilation-1 zeros between taps of a (..., k, k) kernel."""
    k = kernel.shape[-1]
    size = dilation * (k - 1) + 1
    out = np.zeros(kernel.shape[:-2] + (size, size), dtype=kernel.dtype)
    out[..., ::dilation, ::dilation] = kernel
    return out


class DilatedReparamConv(Module):
    """Depthwise large-kernel conv plus parallel dilated small-kernel branches.

    Each branch carries its own per-channel affine (a batch-free norm), so
    the sum folds into one dense large kernel via :func:`merge_drb`.
    """

    def __init__(self, rng, channels: int, large_k: int, branches=None):
        if large_k % 2 == 0:
            raise ValueError(f"DRB kernel size must be odd, got {large_k}")
        if branches is None:
            if large_k not in DRB_BRANCHES:
                raise ValueError(f"no branch recipe for kernel size {large_k}")
            branches = DRB_BRANCHES[large_k]
        for k, d in branches:
            if d * (k - 1) + 1 > large_k:
                raise ValueError(f"branch {k}x{k} dilation {d} exceeds the {large_k} receptive field")
        self.large_k = large_k
        self.spec = tuple(branches)
        self.convs = [Conv2d(rng, channels, channels, k, dilation=d, depthwise=True, bias=False) for k, d in branches]
        self.scales = [Param(np.ones(channels)) for _ in branches]
        self.shifts = [Param(np.zeros(channels)) for _ in branches]

    def forward(self, x: Tensor) -> Tensor:
        out = None
        for conv, s, b in zip(self.convs, self.scales, self.shifts):
            y = conv(x) * s.reshape(1, -1, 1, 1) + b.reshape(1, -1, 1, 1)
            out = y if out is None else out + y
        return out


def merge_drb(drb: DilatedReparamConv) -> tuple[np.ndarray, np.ndarray]:
    """Fold every branch into one depthwise (C,1,k,k) kernel and bias."""
    k = drb.large_k
    channels = drb.scales[0].shape[0]
    kernel = np.zeros((channels, 1, k, k))
    bias = np.zeros(channels)
    for (bk, d), conv, s, b in zip(drb.spec, drb.convs, drb.scales, drb.shifts):
        w = dilate_kernel(conv.weight.data, d) * s.data[:, None, None, None]
        off = (k - w.shape[-1]) // 2
        kernel[:, :, off : off + w.shape[-1], off : off + w.shape[-1]] += w
        bias += b.data
    return kernel, bias


def apply_merged_drb(x: Tensor, kernel: np.ndarray, bias: np.ndarray) -> Tensor:
    k = kernel.shape[-1]
    return nnops.conv2d(x, Tensor(kernel), Tensor(bias), padding=(k - 1) // 2, groups=kernel.shape[0])


class DRBlock(Module):
    """Dilated reparam conv → channel norm → pointwise FFN, with a residual."""

    def __init__(self, rng, channels: int, large_k: int, ffn_ratio: int = 4):
        self.drb = DilatedReparamConv(rng, channels, large_k)
        self.norm = ChannelNorm(channels)
        self.ffn_in = Conv2d(rng, channels, ffn_ratio * channels, 1)
        self.ffn_out = Conv2d(rng, ffn_ratio * channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(self.drb(x))
        return x + self.ffn_out(silu(self.ffn_in(h)))


class DualAttention(Module):
    """Channel gate (pool → bottleneck MLP → σ) then spatial gate
    (channel mean/max → 7×7 conv → σ)."""

    def __init__(self, rng, channels: int, reduction: int = 16):
        hidden = max(channels // reduction, 4)
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, channels)
        self.spatial = Conv2d(rng, 2, 1, 7)

    def forward(self, x: Tensor) -> Tensor:
        b, c, _, _ = x.shape
        pooled = x.mean(axis=(2, 3))
        gate = sigmoid(self.fc2(relu(self.fc1(pooled)))).reshape(b, c, 1, 1)
        x = x * gate
        stats = concat([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
        return x * sigmoid(self.spatial(stats))


class MldLevel(Module):
    def __init__(self, rng, channels: int, out_width: int, ffn_ratio: int):
        self.att = DualAttention(rng, channels)
        self.drb3 = DRBlock(rng, channels, 3, ffn_ratio)
        self.msdrb = [DRBlock(rng, channels, k, ffn_ratio) for k in (9, 7, 5)]
        self.proj = Conv2d(rng, channels, out_width, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.drb3(self.att(x))
        for blk in self.msdrb:
            h = blk(h)
        return self.proj(h)


class MultiLayerDecoder(Module):
    """Per-level attention + DRB stacks, fused at level-1 resolution."""

    def __init__(self, rng, config: ModelConfig):
        common = 2 * config.base_width
        self.common_width = common
        self.levels = [MldLevel(rng, config.width(i), common, config.ffn_ratio) for i in range(1, 5)]
        self.out_head = Conv2d(rng, 4 * common, config.num_classes, 1)
        self.aux_heads = [Conv2d(rng, common, config.num_classes, 1) for _ in range(3)] if config.use_ads else []

    def forward(self, feats: list[Tensor], stem_factor: int = 4):
        if len(feats) != 4:
            raise ValueError(f"multi-layer decoder needs levels 1-4, got {len(feats)} features")
        decoded = [lvl(f) for lvl, f in zip(self.levels, feats)]
        aux = [head(d) for head, d in zip(self.aux_heads, decoded)]
        fused = channel_concat([nnops.upsample_bilinear(d, 2**i) for i, d in enumerate(decoded)])
        logits = nnops.upsample_bilinear(self.out_head(fused), stem_factor)
        return logits, aux


class UNetDecoder(Module):
    """Plain U-shaped decoder: 2×2 transposed conv up, add skip, conv block."""

    def __init__(self, rng, config: ModelConfig):
        widths = [config.width(i) for i in range(1, 5)]
        self.ups = [ConvTranspose2x2(rng, widths[i + 1], widths[i]) for i in range(3)]
        self.convs = [Conv2d(rng, widths[i], widths[i], 3) for i in range(3)]
        self.norms = [ChannelNorm(widths[i]) for i in range(3)]
        self.out_head = Conv2d(rng, widths[0], config.num_classes, 1)
        self.aux_heads = [Conv2d(rng, widths[i], config.num_classes, 1) for i in range(3)] if config.use_ads else []

    def forward(self, feats: list[Tensor], stem_factor: int = 4):
        if len(feats) != 4:
            raise ValueError(f"decoder needs levels 1-4, got {len(feats)} features")
        decoded = [None] * 4
        decoded[3] = feats[3]
        for i in (2, 1, 0):
            h = self.ups[i](decoded[i + 1]) + feats[i]
            decoded[i] = relu(self.norms[i](self.convs[i](h)))
        aux = [head(d) for head, d in zip(self.aux_heads, decoded)]
        logits = nnops.upsample_bilinear(self.out_head(decoded[0]), stem_factor)
        return logits, aux


# -- full network -------------------------------------------------------------
class DBMSMUNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.stem = Stem(rng, config.width(0), config.stem_factor)
        self.stages = [
            MSMMStage(rng, config.width(i), config.width(i + 1), downsample=i > 0, config=config)
            for i in range(NUM_STAGES)
        ]
        self.eep = EdgePath(rng, config) if config.use_eep else None
        self.decoder = MultiLayerDecoder(rng, config) if config.use_mld else UNetDecoder(rng, config)
        self.name_parameters()

    def encode(self, image: Tensor) -> list[StageFeature]:
        image = image if isinstance(image, Tensor) else Tensor(image)
        h, w = image.shape[2], image.shape[3]
        feats = [StageFeature(self.stem(image), 0).check(self.config, h, w)]
        x = feats[0].tensor
        for i, stage in enumerate(self.stages):
            x = stage(x)
            feats.append(StageFeature(x, i + 1).check(self.config, h, w))
        return feats

    def forward(self, image) -> ModelOutputs:
        feats = [f.tensor for f in self.encode(image)[1:]]
        factor = self.config.stem_factor
        logits, aux_area = self.decoder(feats, factor)
        edge_prob, aux_edge = (None, [])
        if self.eep is not None:
            edge_prob, aux_edge = self.eep(feats, factor)
        return ModelOutputs(logits, edge_prob, aux_area, aux_edge)

    def parameter_groups(self) -> dict[str, int]:
        """Parameter counts per named block."""
        groups: dict[str, int] = {}
        for name, p in self.named_parameters():
            if "head" in name:
                key = "heads"
            elif name.startswith("stages."):
                key = f"stage{int(name.split('.')[1]) + 1}"
            elif name.startswith("decoder."):
                key = "mld" if self.config.use_mld else "unet_decoder"
            else:
                key = name.split(".")[0]
            groups[key] = groups.get(key, 0) + p.size
        return groups
