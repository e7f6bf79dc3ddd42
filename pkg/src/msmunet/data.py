"""CT-style preprocessing, edge labels, augmentation, synthetic phantoms and
dataset directories."""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

# -- HU windowing -------------------------------------------------------------


@dataclass(frozen=True)
class WindowSpec:
    lo: float = -100.0
    hi: float = 240.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"window lower bound {self.lo} must be below upper bound {self.hi}")


def hu_window(raw, spec: WindowSpec = WindowSpec()) -> np.ndarray:
    """Clamp HU values to the window and map linearly onto 0..255 (round half up)."""
    if not spec.lo < spec.hi:
        raise ValueError(f"window lower bound {spec.lo} must be below upper bound {spec.hi}")
    v = np.clip(np.asarray(raw, dtype=np.float64), spec.lo, spec.hi)
    scaled = (v - spec.lo) / (spec.hi - spec.lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


# -- Canny edge labels --------------------------------------------------------

CANNY_SIGMA = 1.0
CANNY_LOW = 0.1
CANNY_HIGH = 0.3

# signed gradient directions quantised to 45° (row, col)
_DIRECTIONS = np.array([(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)])


def canny_edges(
    mask,
    sigma: float = CANNY_SIGMA,
    low: float = CANNY_LOW,
    high: float = CANNY_HIGH,
) -> np.ndarray:
    """Binary edge map of a binary mask.

    Gaussian smoothing, Sobel gradients, non-maximum suppression and
    hysteresis at (low, high) fractions of the maximum gradient.  The
    image border is never an edge.  The step in a binary mask lies between
    pixels, so responses are assigned to the mask side of it and edges sit
    on the mask's own boundary pixels.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"canny_edges expects a 2-D mask, got shape {m.shape}")
    img = (m > 0).astype(np.float64) * 255.0
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    mag = np.hypot(gx, gy)
    mag[0, :] = mag[-1, :] = mag[:, 0] = mag[:, -1] = 0.0
    peak = mag.max()
    if peak <= 0:
        return np.zeros(m.shape, dtype=np.uint8)

    angle = np.arctan2(gy, gx)
    sector = np.round(angle / (np.pi / 4)).astype(np.int64) % 8
    dy, dx = _DIRECTIONS[sector, 0], _DIRECTIONS[sector, 1]
    padded = np.pad(mag, 1)
    rows, cols = np.indices(m.shape) + 1
    bright = padded[rows + dy, cols + dx]
    dark = padded[rows - dy, cols - dx]
    tol = 1e-9 * peak
    peaks = (mag > bright + tol) & (mag >= dark - tol) & (mag > 0)
    # a binary mask's edge falls between pixels; label its bright side.  A
    # peak on the dark side hands its response one step along the dominant
    # gradient axis.
    inside = img > 0
    nms = np.where(peaks & inside, mag, 0.0)
    step_y = np.where(np.abs(gy) >= np.abs(gx), np.sign(gy), 0).astype(np.int64)
    step_x = np.where(np.abs(gy) >= np.abs(gx), 0, np.sign(gx)).astype(np.int64)
    py, px = np.nonzero(peaks & ~inside)
    ty, tx = py + step_y[py, px], px + step_x[py, px]
    ok = (ty >= 1) & (ty < m.shape[0] - 1) & (tx >= 1) & (tx < m.shape[1] - 1)
    py, px, ty, tx = py[ok], px[ok], ty[ok], tx[ok]
    ok = inside[ty, tx]
    np.maximum.at(nms, (ty[ok], tx[ok]), mag[py[ok], px[ok]])

    strong = nms >= high * peak
    weak = nms >= low * peak
    labels, count = ndimage.label(weak, structure=np.ones((3, 3)))
    if count == 0:
        return np.zeros(m.shape, dtype=np.uint8)
    hit = np.zeros(count + 1, dtype=bool)
    hit[np.unique(labels[strong])] = True
    hit[0] = False
    return hit[labels].astype(np.uint8)


def morphological_boundary(mask) -> np.ndarray:
    """Mask pixels with at least one 4-connected background neighbour."""
    m = np.asarray(mask) > 0
    eroded = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=1)
    return (m & ~eroded).astype(np.uint8)


def f1_score(pred, ref) -> float:
    p = np.asarray(pred) > 0
    r = np.asarray(ref) > 0
    tp = np.sum(p & r)
    if p.sum() == 0 and r.sum() == 0:
        return 1.0
    if tp == 0:
        return 0.0
    prec = tp / p.sum()
    rec = tp / r.sum()
    return float(2 * prec * rec / (prec + rec))


# -- slices ---------------------------------------------------------------------


@dataclass
class CtSlice:
    """One 8-bit image with its binary organ mask and edge label."""

    id: str
    image: np.ndarray
    mask: np.ndarray
    edge: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.uint8)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.mask.shape != self.image.shape:
            raise ValueError(f"{self.id}: mask shape {self.mask.shape} != image shape {self.image.shape}")
        if not np.all(self.mask <= 1):
            raise ValueError(f"{self.id}: mask is not binary")
        if self.edge is None:
            self.edge = canny_edges(self.mask)
        else:
            self.edge = np.asarray(self.edge, dtype=np.uint8)
            if self.edge.shape != self.image.shape:
                raise ValueError(f"{self.id}: edge shape {self.edge.shape} != image shape {self.image.shape}")
            if not np.all(self.edge <= 1):
                raise ValueError(f"{self.id}: edge map is not binary")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CtSlice)
            and self.id == other.id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.edge, other.edge)
        )


# -- augmentation -------------------------------------------------------------


@dataclass
class AugmentConfig:
    p_flip: float = 0.5
    p_rotate: float = 0.5
    p_noise: float = 0.25
    p_contrast: float = 0.25
    p_smooth: float = 0.25
    p_shift: float = 0.25
    noise_sigma: tuple[float, float] = (0.0, 10.0)
    contrast_gain: tuple[float, float] = (0.8, 1.2)
    smooth_sigma: tuple[float, float] = (0.5, 1.5)
    shift_range: tuple[float, float] = (-15.0, 15.0)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 255.0) + 0.5).astype(np.uint8)


def augment(sl: CtSlice, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> CtSlice:
    """Random flips / 90° rotations (image and mask together, edges
    regenerated) followed by photometric jitter on the image only."""
    image, mask = sl.image, sl.mask
    moved = False
    if rng.random() < config.p_flip:
        image, mask, moved = image[:, ::-1], mask[:, ::-1], True
    if rng.random() < config.p_flip:
        image, mask, moved = image[::-1, :], mask[::-1, :], True
    if rng.random() < config.p_rotate:
        k = int(rng.integers(1, 4))
        image, mask, moved = np.rot90(image, k), np.rot90(mask, k), True

    img = image.astype(np.float64)
    touched = False
    if rng.random() < config.p_noise:
        img = img + rng.normal(0.0, rng.uniform(*config.noise_sigma), img.shape)
        touched = True
    if rng.random() < config.p_contrast:
        mu = img.mean()
        img = (img - mu) * rng.uniform(*config.contrast_gain) + mu
        touched = True
    if rng.random() < config.p_smooth:
        img = ndimage.gaussian_filter(img, rng.uniform(*config.smooth_sigma), mode="nearest")
        touched = True
    if rng.random() < config.p_shift:
        img = img + rng.uniform(*config.shift_range)
        touched = True
    out_image = _quantize(img) if touched else np.ascontiguousarray(image)
    mask = np.ascontiguousarray(mask)
    edge = canny_edges(mask) if moved else sl.edge
    return CtSlice(sl.id, out_image, mask, edge)


def flip_horizontal(sl: CtSlice) -> CtSlice:
    mask = np.ascontiguousarray(sl.mask[:, ::-1])
    return CtSlice(sl.id, np.ascontiguousarray(sl.image[:, ::-1]), mask, canny_edges(mask))


def rotate90(sl: CtSlice, k: int = 1) -> CtSlice:
    mask = np.ascontiguousarray(np.rot90(sl.mask, k))
    return CtSlice(sl.id, np.ascontiguousarray(np.rot90(sl.image, k)), mask, canny_edges(mask))


# -- synthetic phantoms ---------------------------------------------------------


@dataclass
class PhantomSpec:
    """Parameters of the synthetic low-contrast organ generator.

    Lengths are in pixels at ``size`` = 64 and scale with the image size.
    Intensities are in HU before windowing.
    """

    size: int = 64
    seed: int = 0
    center: tuple[float, float] | None = None
    axes: tuple[float, float] | None = None
    rotation: float | None = None
    axis_range: tuple[float, float] = (5.5, 9.0)
    aspect_range: tuple[float, float] = (0.45, 0.7)
    deformation: float = 0.15
    lesion_count: tuple[int, int] = (0, 2)
    lesion_radius: tuple[float, float] = (1.0, 2.0)
    contrast_gap: float = 60.0
    background_hu: float = 40.0
    noise_sigma: float = 12.0
    distractors: int = 3
    window: WindowSpec = field(default_factory=WindowSpec)


MAX_ORGAN_FRACTION = 0.05


def _smooth_texture(rng, size: int, scale: float) -> np.ndarray:
    field_ = rng.normal(size=(size, size))
    field_ = ndimage.gaussian_filter(field_, scale, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _blob(rows, cols, cy, cx, a, b, theta, amp, phases, freqs):
    dy, dx = rows - cy, cols - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    wobble = 1.0 + amp * sum(np.sin(f * phi + p) for f, p in zip(freqs, phases)) / max(len(freqs), 1)
    return r <= wobble


def generate_phantom(spec: PhantomSpec = PhantomSpec(), slice_id: str | None = None) -> CtSlice:
    """Deterministic synthetic slice: a deformed ellipse organ (with optional
    lesions) on a textured background with distractor blobs and noise."""
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    unit = n / 64.0
    rows, cols = np.indices((n, n), dtype=np.float64)

    if spec.axes is not None:
        a, b = spec.axes
    else:
        a = rng.uniform(*spec.axis_range) * unit
        b = a * rng.uniform(*spec.aspect_range)
    if a <= 0 or b <= 0:
        raise ValueError("phantom organ axes must be positive")
    if spec.center is not None:
        cy, cx = spec.center
    else:
        margin = a + 0.2 * n
        cy = rng.uniform(margin, n - margin) if n - 2 * margin > 0 else n / 2
        cx = rng.uniform(margin, n - margin) if n - 2 * margin > 0 else n / 2
    theta = spec.rotation if spec.rotation is not None else rng.uniform(0, math.pi)
    freqs = [2, 3]
    phases = rng.uniform(0, 2 * math.pi, len(freqs))
    organ = _blob(rows, cols, cy, cx, a, b, theta, spec.deformation, phases, freqs)

    lesions = np.zeros_like(organ)
    lesion_sign = np.zeros((n, n))
    inside = np.argwhere(organ)
    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(n_lesions):
        if len(inside) == 0:
            break
        ly, lx = inside[rng.integers(len(inside))]
        rad = rng.uniform(*spec.lesion_radius) * unit
        disk = np.hypot(rows - ly, cols - lx) <= rad
        lesions |= disk
        lesion_sign[disk] = 1.0 if rng.random() < 0.5 else -1.0

    mask = organ | lesions
    frac = mask.mean()
    if frac == 0:
        raise ValueError("phantom spec produces an empty organ")
    if frac > MAX_ORGAN_FRACTION:
        raise ValueError(f"phantom organ covers {frac:.3f} of the slice (limit {MAX_ORGAN_FRACTION})")

    hu = spec.background_hu + 25.0 * _smooth_texture(rng, n, 3.0 * unit)
    for _ in range(spec.distractors):
        da = rng.uniform(8.0, 16.0) * unit
        db = da * rng.uniform(0.5, 1.0)
        dcy, dcx = rng.uniform(0, n, 2)
        blob = _blob(rows, cols, dcy, dcx, da, db, rng.uniform(0, math.pi), 0.1, rng.uniform(0, 6, 2), freqs)
        blob &= ~ndimage.binary_dilation(mask, iterations=max(1, int(2 * unit)))
        level = rng.choice([-1.5, 2.0]) * spec.contrast_gap
        hu = np.where(blob, hu + level, hu)
    hu = hu + np.where(organ, spec.contrast_gap, 0.0)
    hu = hu + lesion_sign * 0.6 * spec.contrast_gap
    hu = hu + rng.normal(0.0, spec.noise_sigma, (n, n))
    image = hu_window(hu, spec.window)
    mask = mask.astype(np.uint8)
    return CtSlice(slice_id or f"phantom_{spec.seed:06d}", image, mask, canny_edges(mask))


def generate_dataset(count: int, spec: PhantomSpec = PhantomSpec(), first_seed: int = 0) -> list[CtSlice]:
    return [generate_phantom(replace(spec, seed=first_seed + i)) for i in range(count)]


# -- dataset directories -------------------------------------------------------


def write_pgm(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    payload = f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()
    atomic_write_bytes(Path(path), payload)


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pos += 1
    arr = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if arr.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return arr.reshape(h, w).copy()


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dir(slices: list[CtSlice], path) -> None:
    root = Path(path)
    for sl in slices:
        write_pgm(root / "images" / f"{sl.id}.pgm", sl.image)
        write_pgm(root / "masks" / f"{sl.id}.pgm", sl.mask * 255)
        write_pgm(root / "edges" / f"{sl.id}.pgm", sl.edge * 255)
    atomic_write_bytes(root / "manifest.txt", "".join(f"{sl.id}\n" for sl in slices).encode())


def _binary_from_pgm(arr: np.ndarray, sid: str, what: Path) -> np.ndarray:
    if not np.all((arr == 0) | (arr == 255)):
        bad = sorted(set(np.unique(arr).tolist()) - {0, 255})
        raise ValueError(f"{sid}: {what} must hold only 0 or 255, found {bad[:5]}")
    return (arr == 255).astype(np.uint8)


def load_dir(path) -> list[CtSlice]:
    """Load a dataset directory in manifest order."""
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{root}: no manifest.txt")
    ids = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    slices = []
    for sid in ids:
        img_path = root / "images" / f"{sid}.pgm"
        mask_path = root / "masks" / f"{sid}.pgm"
        if not img_path.exists() or not mask_path.exists():
            raise ValueError(f"{sid}: missing image or mask file")
        image = read_pgm(img_path)
        mask = _binary_from_pgm(read_pgm(mask_path), sid, mask_path)
        if mask.shape != image.shape:
            raise ValueError(f"{sid}: mask size {mask.shape} does not match image size {image.shape}")
        edge_path = root / "edges" / f"{sid}.pgm"
        edge = _binary_from_pgm(read_pgm(edge_path), sid, edge_path) if edge_path.exists() else None
        if edge is not None and edge.shape != image.shape:
            raise ValueError(f"{sid}: edge size {edge.shape} does not match image size {image.shape}")
        slices.append(CtSlice(sid, image, mask, edge))
    return slices


def standardize(images: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-image zero mean, unit variance over the spatial axes.

    A flat image maps to all zeros instead of dividing by ~0.
    """
    images = np.asarray(images, dtype=np.float64)
    mean = images.mean(axis=(-2, -1), keepdims=True)
    std = images.std(axis=(-2, -1), keepdims=True)
    return (images - mean) / np.maximum(std, eps)


def stack_batch(slices: list[CtSlice]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(standardized images, masks, edges) as (B,1,H,W) float arrays."""
    images = standardize(np.stack([s.image for s in slices])[:, None])
    masks = np.stack([s.mask for s in slices])[:, None].astype(np.float64)
    edges = np.stack([s.edge for s in slices])[:, None].astype(np.float64)
    return images, masks, edges
