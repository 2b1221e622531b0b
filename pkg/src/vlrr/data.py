"""LR/HR pair generation, corruption, augmentation and the synthetic glyph set.

Images are float64 arrays with a leading channel axis of 1: a single image is
(1, H, W) and a stack is (N, 1, H, W). Pixel values live in [0, 1] until
``normalize`` is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError

NORM_EPS = 1e-8
MAX_SYNTH_CLASSES = 16


@dataclass
class ImageDataset:
    images: np.ndarray  # (count, 1, H, W), values in [0, 1]
    labels: np.ndarray  # (count,) int
    class_count: int
    held_out: np.ndarray | None = None  # (count,) bool, True for test samples

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DimensionError("shape", "(count, 1, H, W)", self.images.shape, "ImageDataset")
        if self.labels.shape != (len(self.images),):
            raise DimensionError("count", len(self.images), self.labels.shape, "ImageDataset labels")
        if self.class_count < 1:
            raise ParameterError(f"class_count must be positive, got {self.class_count}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ParameterError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "ImageDataset":
        held = None if self.held_out is None else self.held_out[index]
        return ImageDataset(self.images[index], self.labels[index], self.class_count, held)

    def split(self) -> tuple["ImageDataset", "ImageDataset"]:
        """(train, test) according to ``held_out``."""
        if self.held_out is None:
            raise ParameterError("dataset carries no held-out flags")
        return self.subset(~self.held_out), self.subset(self.held_out)


@dataclass(frozen=True)
class DegradationSpec:
    s: int = 4
    gaussian_sigma: float = 0.05
    sp_fraction: float = 0.0

    def __post_init__(self):
        if int(self.s) != self.s or self.s < 2:
            raise ParameterError(f"downsampling factor must be an integer >= 2, got {self.s}")
        if self.gaussian_sigma < 0:
            raise ParameterError(f"gaussian_sigma must be >= 0, got {self.gaussian_sigma}")
        if not 0.0 <= self.sp_fraction <= 1.0:
            raise ParameterError(f"sp_fraction must be in [0, 1], got {self.sp_fraction}")

    def check_size(self, height: int, width: int) -> None:
        if height % self.s:
            raise DimensionError("height", f"multiple of {self.s}", height, "DegradationSpec")
        if width % self.s:
            raise DimensionError("width", f"multiple of {self.s}", width, "DegradationSpec")


@dataclass
class LrHrPair:
    """Normalised LR/HR images for one sample.

    ``lr`` is the nearest-neighbour upscaled LR image (HR resolution). Both
    images were normalised with the LR image's ``mean`` and ``scale``, so
    ``x * scale + mean`` maps either back to pixel units.
    """

    lr: np.ndarray
    hr: np.ndarray
    mean: float
    scale: float

    def denormalize(self, image: np.ndarray) -> np.ndarray:
        return image * self.scale + self.mean


@dataclass
class PairSet:
    """Stacked ``LrHrPair`` fields, optionally with class labels."""

    lr: np.ndarray  # (N, 1, H, W)
    hr: np.ndarray  # (N, 1, H, W)
    mean: np.ndarray  # (N,)
    scale: np.ndarray  # (N,)
    labels: np.ndarray | None = None
    class_count: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.lr)

    def __getitem__(self, i: int) -> LrHrPair:
        return LrHrPair(self.lr[i], self.hr[i], float(self.mean[i]), float(self.scale[i]))

    def subset(self, index) -> "PairSet":
        labels = None if self.labels is None else self.labels[index]
        return PairSet(
            self.lr[index], self.hr[index], self.mean[index], self.scale[index], labels,
            self.class_count, dict(self.meta),
        )


def _spatial(image: np.ndarray) -> tuple[int, int]:
    return image.shape[-2], image.shape[-1]


def downsample_area(image: np.ndarray, s: int) -> np.ndarray:
    """Mean over non-overlapping s x s blocks of the last two axes."""
    h, w = _spatial(image)
    if h % s:
        raise DimensionError("height", f"multiple of {s}", h, "downsample_area")
    if w % s:
        raise DimensionError("width", f"multiple of {s}", w, "downsample_area")
    blocks = image.reshape(*image.shape[:-2], h // s, s, w // s, s)
    # averaging offsets from each block's first pixel keeps constant blocks
    # exact, so downsample_area(upscale_nn(x, s), s) == x bit for bit
    anchor = blocks[..., :, :1, :, :1]
    return anchor[..., :, 0, :, 0] + (blocks - anchor).mean(axis=(-3, -1))


def upscale_nn(image: np.ndarray, s: int) -> np.ndarray:
    """Nearest-neighbour upscale: every pixel becomes an s x s block."""
    return np.repeat(np.repeat(image, s, axis=-2), s, axis=-1)


def normalize(image: np.ndarray):
    """Subtract the image mean and divide by its std (epsilon guarded).

    Returns ``(normalized, mean, scale)`` with ``scale = std + 1e-8``.
    """
    mean = float(image.mean())
    centered = image - mean
    scale = float(np.sqrt(np.mean(centered * centered))) + NORM_EPS
    return centered / scale, mean, scale


def degrade(hr_image: np.ndarray, s: int) -> np.ndarray:
    """Downsample by ``s`` and upscale back with nearest neighbour."""
    return upscale_nn(downsample_area(hr_image, s), s)


def make_lr_pair(hr_image: np.ndarray, spec: DegradationSpec) -> LrHrPair:
    spec.check_size(*_spatial(hr_image))
    lr = degrade(hr_image, spec.s)
    lr_n, mean, scale = normalize(lr)
    return LrHrPair(lr_n, (hr_image - mean) / scale, mean, scale)


def add_gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image.copy()
    return image + rng.normal(0.0, sigma, size=image.shape)


def corrupted_pixel_count(pixels: int, fraction: float) -> int:
    # round-half-even matches Python's round(); 0.15 * 1024 = 153.6 -> 154
    return int(round(fraction * pixels))


def corrupt_salt_pepper(image: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Set ``round(fraction * H * W)`` distinct pixels to 0 or 1 (probability 1/2 each).

    The same pixel positions are hit in every channel.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"corruption fraction must be in [0, 1], got {fraction}")
    h, w = _spatial(image)
    out = image.copy()
    count = corrupted_pixel_count(h * w, fraction)
    if count == 0:
        return out
    where = rng.choice(h * w, size=count, replace=False)
    values = rng.integers(0, 2, size=count).astype(np.float64)
    flat = out.reshape(*out.shape[:-2], h * w)
    flat[..., where] = values
    return flat.reshape(out.shape)


def make_pair_set(
    dataset: ImageDataset,
    spec: DegradationSpec,
    rng=None,
    corrupt: bool = True,
) -> PairSet:
    """Degrade every image of ``dataset`` into normalised LR/HR pairs.

    When ``spec.sp_fraction > 0`` and ``corrupt`` is set, each HR image is first
    hit with salt-and-pepper noise from sub-stream ``("corrupt", index)`` of the
    ``RandomState`` ``rng``, so the result does not depend on processing order.
    """
    n = len(dataset)
    h, w = dataset.images.shape[2:]
    spec.check_size(h, w)
    lr = np.empty_like(dataset.images)
    hr = np.empty_like(dataset.images)
    mean = np.empty(n)
    scale = np.empty(n)
    corrupted = 0
    for i in range(n):
        img = dataset.images[i]
        if corrupt and spec.sp_fraction > 0:
            if rng is None:
                raise ParameterError("a RandomState is required for corruption")
            img = corrupt_salt_pepper(img, spec.sp_fraction, rng.stream("corrupt", i))
            corrupted += corrupted_pixel_count(h * w, spec.sp_fraction)
        pair = make_lr_pair(img, spec)
        lr[i], hr[i], mean[i], scale[i] = pair.lr, pair.hr, pair.mean, pair.scale
    meta = {"s": spec.s, "sp_fraction": spec.sp_fraction, "corrupted_pixels": corrupted}
    return PairSet(lr, hr, mean, scale, dataset.labels.copy(), dataset.class_count, meta)


# --- synthetic glyphs -------------------------------------------------------

def _bar(yy, xx, cy, cx, angle, half_len, thick):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (np.abs(u) <= half_len) & (np.abs(v) <= thick / 2)


def _glyph(family: int, side: int, g: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    m = side / 32.0
    cy = side / 2 + g.uniform(-4, 4) * m
    cx = side / 2 + g.uniform(-4, 4) * m
    thick = g.uniform(2.0, 4.0) * m
    size = g.uniform(6, 10) * m
    jitter = g.uniform(-0.2, 0.2)
    pi = np.pi
    if family == 0:  # horizontal bar
        mask = _bar(yy, xx, cy, cx, jitter, size, thick)
    elif family == 1:  # vertical bar
        mask = _bar(yy, xx, cy, cx, pi / 2 + jitter, size, thick)
    elif family == 2:  # diagonal bar
        mask = _bar(yy, xx, cy, cx, pi / 4 + jitter, size, thick)
    elif family == 3:  # anti-diagonal bar
        mask = _bar(yy, xx, cy, cx, -pi / 4 + jitter, size, thick)
    elif family == 4:  # upright cross
        mask = _bar(yy, xx, cy, cx, jitter, size, thick) | _bar(yy, xx, cy, cx, pi / 2 + jitter, size, thick)
    elif family == 5:  # diagonal cross
        mask = _bar(yy, xx, cy, cx, pi / 4 + jitter, size, thick) | _bar(yy, xx, cy, cx, -pi / 4 + jitter, size, thick)
    elif family == 6:  # ring
        r = np.hypot(yy - cy, xx - cx)
        mask = np.abs(r - size * 0.8) <= thick / 2
    elif family == 7:  # filled disk
        mask = np.hypot(yy - cy, xx - cx) <= size * 0.6
    elif family in (8, 9, 10, 11):  # corner (L shape), four orientations
        sy = -1 if family in (8, 9) else 1
        sx = -1 if family in (8, 10) else 1
        arm = size
        in_h = (np.abs(yy - cy) <= thick / 2) & ((xx - cx) * sx >= -thick / 2) & ((xx - cx) * sx <= arm)
        in_v = (np.abs(xx - cx) <= thick / 2) & ((yy - cy) * sy >= -thick / 2) & ((yy - cy) * sy <= arm)
        mask = in_h | in_v
    elif family in (12, 13):  # horizontal / vertical grating
        period = g.uniform(4, 8) * m
        phase = g.uniform(0, period)
        coord = yy if family == 12 else xx
        mask = (((coord + phase) % period) < period / 2) & (np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= size)
    elif family == 14:  # hollow square
        d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        mask = np.abs(d - size * 0.75) <= thick / 2
    else:  # checkerboard patch
        period = g.uniform(4, 8) * m
        phase_y, phase_x = g.uniform(0, period, size=2)
        check = ((((yy + phase_y) // (period / 2)) + ((xx + phase_x) // (period / 2))) % 2) == 0
        mask = check & (np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= size)
    background = g.uniform(0.1, 0.6)
    contrast = g.uniform(0.25, 0.45) * (1 if g.random() < 0.5 else -1)
    # smooth shading plus pixel noise
    gy, gx = g.normal(0, 0.1, size=2)
    shade = gy * (yy / side - 0.5) + gx * (xx / side - 0.5)
    img = background + shade + contrast * mask + g.normal(0, 0.03, size=mask.shape)
    # 8-bit grid keeps the dataset file round trip exact; staying off 0 and 1
    # means every salt-and-pepper hit changes its pixel
    return np.round(np.clip(img, 1 / 255, 254 / 255) * 255.0) / 255.0


def synth_dataset(
    classes: int,
    per_class: int,
    side: int = 32,
    rng=None,
    n_train: int | None = None,
) -> ImageDataset:
    """Deterministic parametric glyphs, one shape family per class.

    Samples are interleaved by class (label ``i % classes``) and every glyph is
    drawn from sub-stream ``("synth", i)`` of the ``RandomState`` ``rng``.
    The first ``n_train`` samples form the training split and the rest carry
    ``held_out=True`` (default: 80% of the samples, rounded down to whole rounds
    of classes).
    """
    from .rng import RandomState

    if not 1 <= classes <= MAX_SYNTH_CLASSES:
        raise ParameterError(f"synthetic set supports 1..{MAX_SYNTH_CLASSES} classes, got {classes}")
    if per_class < 1:
        raise ParameterError(f"per_class must be positive, got {per_class}")
    rng = rng if rng is not None else RandomState(0)
    count = classes * per_class
    images = np.empty((count, 1, side, side))
    labels = np.arange(count) % classes
    for i in range(count):
        images[i, 0] = _glyph(int(labels[i]), side, rng.stream("synth", i))
    if n_train is None:
        n_train = (int(0.8 * per_class)) * classes
    if not 0 <= n_train <= count:
        raise ParameterError(f"n_train must be in [0, {count}], got {n_train}")
    held_out = np.arange(count) >= n_train
    return ImageDataset(images, labels, classes, held_out)
