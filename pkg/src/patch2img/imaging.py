"""Image ingestion, pre-processing (grayscale, gamma, CLAHE), resizing and augmentation.

Images travel as float arrays shaped ``(1, C, H, W)`` with values in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError
from sklearn.base import BaseEstimator, TransformerMixin

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
DEFAULT_GAMMA = 1.7
DEFAULT_CLAHE_TILES = (8, 8)
DEFAULT_CLAHE_CLIP = 2.0
DEFAULT_CLAHE_BINS = 256
PREPROCESS_STEPS = ("grayscale", "gamma", "clahe")


class ImageReadError(OSError):
    pass


def _as_image_tensor(img, name="image"):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None, None]
    elif img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[0] != 1:
        raise ValueError(f"{name} must be shaped (1, C, H, W), got {img.shape}")
    return img


def to_grayscale(rgb):
    """BT.601 luma of a ``(1, 3, H, W)`` image; single-channel input passes through."""
    rgb = _as_image_tensor(rgb)
    if rgb.shape[1] == 1:
        return rgb.copy()
    if rgb.shape[1] != 3:
        raise ValueError(f"expected 3 colour channels, got {rgb.shape[1]}")
    r, g, b = LUMA_WEIGHTS
    return (r * rgb[:, 0:1] + g * rgb[:, 1:2] + b * rgb[:, 2:3]).astype(rgb.dtype)


def gamma_correct(img, gamma=DEFAULT_GAMMA, mode="brighten"):
    """``in ** (1/gamma)`` when brightening (the default), ``in ** gamma`` otherwise."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if mode not in ("brighten", "darken"):
        raise ValueError(f"unknown gamma mode {mode!r}")
    img = np.clip(np.asarray(img), 0.0, 1.0)
    exponent = 1.0 / gamma if mode == "brighten" else gamma
    return np.power(img, exponent).astype(img.dtype)


def _clip_histogram(hist, limit):
    # OpenCV-style: clip, spread the excess evenly, then one extra count every
    # `step` bins for the remainder
    bins = hist.size
    excess = int(np.maximum(hist - limit, 0).sum())
    hist = np.minimum(hist, limit)
    hist += excess // bins
    residual = excess % bins
    if residual:
        step = max(bins // residual, 1)
        idx = np.arange(0, bins, step)[:residual]
        hist[idx] += 1
    return hist


def clahe(img, tiles=DEFAULT_CLAHE_TILES, clip=DEFAULT_CLAHE_CLIP, bins=DEFAULT_CLAHE_BINS):
    """Contrast-limited adaptive histogram equalization of a single-channel image.

    The image is split into ``tiles`` (rows, cols); each tile gets a clipped
    equalization lookup table and pixels blend the four nearest tables
    bilinearly. ``clip`` is relative to a uniform histogram (OpenCV
    convention). Input and output values lie in [0, 1].
    """
    img4 = _as_image_tensor(img)
    if img4.shape[1] != 1:
        raise ValueError("clahe expects a single-channel image")
    x = np.clip(img4[0, 0].astype(np.float64), 0.0, 1.0)
    h, w = x.shape
    ty, tx = tiles
    if h < ty or w < tx:
        raise ValueError(f"image {h}x{w} is smaller than one tile of the {ty}x{tx} grid")
    q = np.clip(np.rint(x * (bins - 1)), 0, bins - 1).astype(np.intp)

    th, tw = -(-h // ty), -(-w // tx)
    pad_h, pad_w = th * ty - h, tw * tx - w
    qp = np.pad(q, ((0, pad_h), (0, pad_w)), mode="reflect") if (pad_h or pad_w) else q
    area = th * tw
    limit = max(int(clip * area / bins), 1) if clip > 0 else area

    luts = np.empty((ty, tx, bins), dtype=np.float64)
    scale = (bins - 1) / area
    for i in range(ty):
        for j in range(tx):
            tile = qp[i * th : (i + 1) * th, j * tw : (j + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=bins)
            hist = _clip_histogram(hist, limit)
            luts[i, j] = np.clip(np.rint(np.cumsum(hist) * scale), 0, bins - 1)

    def axis_weights(n, size, count):
        # OpenCV convention: tile centres at (k + 0.5) * size, pixel at its index
        f = np.arange(n) / size - 0.5
        lo = np.floor(f).astype(np.intp)
        frac = f - lo
        hi = np.minimum(lo + 1, count - 1)
        lo = np.maximum(lo, 0)
        return lo, hi, frac

    y1, y2, ya = axis_weights(h, th, ty)
    x1, x2, xa = axis_weights(w, tw, tx)
    Y1, X1 = np.ix_(y1, x1)
    Y2, X2 = np.ix_(y2, x2)
    ya = ya[:, None]
    xa = xa[None, :]
    top = luts[Y1, X1, q] * (1 - xa) + luts[Y1, X2, q] * xa
    bot = luts[Y2, X1, q] * (1 - xa) + luts[Y2, X2, q] * xa
    out = (top * (1 - ya) + bot * ya) / (bins - 1)
    return np.clip(out, 0.0, 1.0).astype(img4.dtype)[None, None]


def preprocess(img, steps=PREPROCESS_STEPS, gamma=DEFAULT_GAMMA, gamma_mode="brighten",
               clahe_tiles=DEFAULT_CLAHE_TILES, clahe_clip=DEFAULT_CLAHE_CLIP,
               clahe_bins=DEFAULT_CLAHE_BINS):
    """Run the fixed-order chain grayscale -> gamma -> CLAHE, skipping disabled steps."""
    unknown = set(steps) - set(PREPROCESS_STEPS)
    if unknown:
        raise ValueError(f"unknown pre-processing steps {sorted(unknown)}")
    out = _as_image_tensor(img).astype(np.float32)
    if "grayscale" in steps:
        out = to_grayscale(out)
    if "gamma" in steps:
        out = gamma_correct(out, gamma, gamma_mode)
    if "clahe" in steps:
        out = clahe(out, clahe_tiles, clahe_clip, clahe_bins)
    return out


def _interp_axis(n_src, n_dst):
    scale = n_src / n_dst
    f = np.clip((np.arange(n_dst) + 0.5) * scale - 0.5, 0, n_src - 1)
    lo = np.floor(f).astype(np.intp)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, f - lo


def resize_bilinear(img, size):
    """Bilinear resize with pixel-centre alignment; ``size`` is ``(H, W)``."""
    img4 = _as_image_tensor(img)
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    src_h, src_w = img4.shape[2:]
    if (h, w) == (src_h, src_w):
        return img4.copy()
    y0, y1, fy = _interp_axis(src_h, h)
    x0, x1, fx = _interp_axis(src_w, w)
    x = img4.astype(np.float64)
    rows = x[:, :, y0] * (1 - fy)[:, None] + x[:, :, y1] * fy[:, None]
    out = rows[..., x0] * (1 - fx) + rows[..., x1] * fx
    return out.astype(img4.dtype)


def resize_back(prob, original_size):
    """Resize a probability map to the image's original extent."""
    return resize_bilinear(prob, original_size)


def resize_mask(mask, size):
    """Nearest-neighbour resize followed by re-binarization at 0.5."""
    m4 = _as_image_tensor(mask)
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    src_h, src_w = m4.shape[2:]
    yi = np.minimum(((np.arange(h) + 0.5) * src_h / h).astype(np.intp), src_h - 1)
    xi = np.minimum(((np.arange(w) + 0.5) * src_w / w).astype(np.intp), src_w - 1)
    out = m4[:, :, yi][..., xi]
    return (out >= 0.5).astype(np.float32)


def round_to_multiple(size, m=4):
    """Nearest extents that are positive multiples of ``m``."""
    return tuple(max(m, int(round(s / m)) * m) for s in size)


def flip_h(x):
    return x[..., ::-1].copy()


def flip_v(x):
    return x[..., ::-1, :].copy()


def translate(x, dy, dx):
    """Integer shift with zero fill."""
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = x[..., src_y, src_x]
    return out


@dataclass
class ImageSample:
    """A pre-processed image with its binary ground truth.

    ``image`` and ``mask`` are at the working (resized) resolution;
    ``mask_full`` and ``fov_full`` keep the original resolution for metrics.
    """

    image: np.ndarray
    mask: np.ndarray
    original_size: tuple
    id: str = ""
    split: str = "train"
    mask_full: np.ndarray | None = None
    fov_full: np.ndarray | None = None

    def __post_init__(self):
        self.image = _as_image_tensor(self.image, "image").astype(np.float32)
        self.mask = _as_image_tensor(self.mask, "mask").astype(np.float32)
        if self.image.shape[2:] != self.mask.shape[2:]:
            raise ValueError(
                f"sample {self.id!r}: image {self.image.shape[2:]} and mask "
                f"{self.mask.shape[2:]} differ in size"
            )
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError(f"sample {self.id!r}: mask is not binary")
        self.original_size = tuple(int(v) for v in self.original_size)
        if self.mask_full is None and self.original_size == self.mask.shape[2:]:
            self.mask_full = self.mask

    @property
    def size(self):
        return self.image.shape[2:]


def augment(sample, seed, max_shift=0.1):
    """Random flips and an integer translation applied identically to image and mask."""
    rng = np.random.default_rng(seed)
    h, w = sample.size
    do_h, do_v = rng.random(2) < 0.5
    dy = int(rng.integers(-int(max_shift * h), int(max_shift * h) + 1))
    dx = int(rng.integers(-int(max_shift * w), int(max_shift * w) + 1))
    return apply_geometry(sample, do_h, do_v, dy, dx)


def apply_geometry(sample, hflip=False, vflip=False, dy=0, dx=0):
    img, mask = sample.image, sample.mask
    if hflip:
        img, mask = flip_h(img), flip_h(mask)
    if vflip:
        img, mask = flip_v(img), flip_v(mask)
    if dy or dx:
        img, mask = translate(img, dy, dx), translate(mask, dy, dx)
    return replace(sample, image=img, mask=mask, mask_full=None, fov_full=None)


def read_image(path):
    """Load an 8-bit raster (PNG, PPM/PGM, GIF, TIFF, ...) as ``(1, C, H, W)`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK", "YCbCr") else "L")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise ImageReadError(f"{path}: no such file") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageReadError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim == 2:
        return arr[None, None]
    return arr.transpose(2, 0, 1)[None]


def read_mask(path):
    img = read_image(path)
    if img.shape[1] > 1:
        img = img.max(axis=1, keepdims=True)
    return (img >= 0.5).astype(np.float32)


def write_png(path, img):
    """Write a [0, 1] single-channel map as 8-bit grayscale, ``round(255 * p)``."""
    arr = np.asarray(img, dtype=np.float64).reshape(np.shape(img)[-2:])
    Image.fromarray(np.rint(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def write_probability_maps(directory, sample_id, prob, threshold=0.5):
    os.makedirs(directory, exist_ok=True)
    prob_path = os.path.join(directory, f"{sample_id}_prob.png")
    bin_path = os.path.join(directory, f"{sample_id}_bin.png")
    write_png(prob_path, prob)
    write_png(bin_path, (np.asarray(prob) >= threshold).astype(np.float64))
    return prob_path, bin_path


@dataclass
class ManifestEntry:
    image: str
    mask: str
    split: str = "train"
    fov: str | None = None
    id: str | None = None

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.id is None:
            self.id = os.path.splitext(os.path.basename(self.image))[0]


@dataclass
class DatasetManifest:
    """Dataset listing plus the resize and pre-processing settings.

    YAML schema::

        resize: [584, 568]            # working size, multiples of 4
        preprocess: [grayscale, gamma, clahe]
        gamma: 1.7
        gamma_mode: brighten          # or darken
        clahe: {tiles: [8, 8], clip: 2.0, bins: 256}
        entries:
          - {image: a.png, mask: a_gt.png, fov: a_fov.png, split: train}

    Relative paths resolve against the manifest's directory.
    """

    entries: list
    resize: tuple | None = None
    preprocess: tuple = PREPROCESS_STEPS
    gamma: float = DEFAULT_GAMMA
    gamma_mode: str = "brighten"
    clahe_tiles: tuple = DEFAULT_CLAHE_TILES
    clahe_clip: float = DEFAULT_CLAHE_CLIP
    clahe_bins: int = DEFAULT_CLAHE_BINS
    root: str = "."
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.resize is not None:
            self.resize = tuple(int(v) for v in self.resize)
            if any(v <= 0 or v % 4 for v in self.resize):
                raise ValueError(f"resize target {self.resize} must be positive multiples of 4")
        self.preprocess = tuple(self.preprocess)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
        return cls.from_dict(d, root=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_dict(cls, d, root="."):
        c = d.get("clahe", {}) or {}
        entries = [ManifestEntry(**e) for e in d.get("entries", [])]
        known = {"entries", "resize", "preprocess", "gamma", "gamma_mode", "clahe"}
        return cls(
            entries=entries,
            resize=d.get("resize"),
            preprocess=tuple(d.get("preprocess", PREPROCESS_STEPS)),
            gamma=float(d.get("gamma", DEFAULT_GAMMA)),
            gamma_mode=d.get("gamma_mode", "brighten"),
            clahe_tiles=tuple(c.get("tiles", DEFAULT_CLAHE_TILES)),
            clahe_clip=float(c.get("clip", DEFAULT_CLAHE_CLIP)),
            clahe_bins=int(c.get("bins", DEFAULT_CLAHE_BINS)),
            root=root,
            extra={k: v for k, v in d.items() if k not in known},
        )

    def to_dict(self):
        return {
            "resize": list(self.resize) if self.resize else None,
            "preprocess": list(self.preprocess),
            "gamma": self.gamma,
            "gamma_mode": self.gamma_mode,
            "clahe": {"tiles": list(self.clahe_tiles), "clip": self.clahe_clip,
                      "bins": self.clahe_bins},
            "entries": [
                {k: v for k, v in vars(e).items() if v is not None} for e in self.entries
            ],
        }

    def preprocess_settings(self):
        return {
            "steps": self.preprocess,
            "gamma": self.gamma,
            "gamma_mode": self.gamma_mode,
            "clahe_tiles": self.clahe_tiles,
            "clahe_clip": self.clahe_clip,
            "clahe_bins": self.clahe_bins,
        }

    def path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.root, p)

    def fingerprint(self):
        """Hash of the settings and the raw bytes of every referenced file."""
        h = hashlib.sha256(yaml.safe_dump(self.to_dict(), sort_keys=True).encode())
        for e in self.entries:
            for p in (e.image, e.mask, e.fov):
                if p is None:
                    continue
                try:
                    with open(self.path(p), "rb") as fh:
                        h.update(fh.read())
                except FileNotFoundError:
                    raise ImageReadError(f"{self.path(p)}: no such file") from None
        return h.hexdigest()


def load_sample(entry, manifest):
    raw = read_image(manifest.path(entry.image))
    mask = read_mask(manifest.path(entry.mask))
    fov = read_mask(manifest.path(entry.fov)) if entry.fov else None
    original = raw.shape[2:]
    if mask.shape[2:] != original:
        raise ValueError(f"{entry.mask}: mask size {mask.shape[2:]} != image size {original}")
    target = manifest.resize or round_to_multiple(original)
    # resizing precedes every other processing step
    img = preprocess(
        resize_bilinear(raw, target),
        manifest.preprocess,
        manifest.gamma,
        manifest.gamma_mode,
        manifest.clahe_tiles,
        manifest.clahe_clip,
        manifest.clahe_bins,
    )
    return ImageSample(
        image=img,
        mask=resize_mask(mask, target),
        original_size=original,
        id=entry.id,
        split=entry.split,
        mask_full=mask,
        fov_full=fov,
    )


def load_dataset(manifest):
    return [load_sample(e, manifest) for e in manifest.entries]


def save_samples(directory, samples):
    """Cache pre-processed samples as ``samples.npz`` plus ``samples.json``."""
    os.makedirs(directory, exist_ok=True)
    arrays, index = {}, []
    for i, s in enumerate(samples):
        arrays[f"{i}/image"] = s.image
        arrays[f"{i}/mask"] = s.mask
        if s.mask_full is not None and s.mask_full is not s.mask:
            arrays[f"{i}/mask_full"] = s.mask_full
        if s.fov_full is not None:
            arrays[f"{i}/fov_full"] = s.fov_full
        index.append({"id": s.id, "split": s.split, "original_size": list(s.original_size)})
    tmp = os.path.join(directory, "samples.tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, os.path.join(directory, "samples.npz"))
    with open(os.path.join(directory, "samples.json"), "w") as fh:
        json.dump(index, fh, indent=1)


def load_samples(directory, split=None):
    """Inverse of :func:`save_samples`, optionally keeping one split."""
    try:
        with open(os.path.join(directory, "samples.json")) as fh:
            index = json.load(fh)
        data = np.load(os.path.join(directory, "samples.npz"))
    except FileNotFoundError:
        raise ImageReadError(f"{directory}: not a prepared dataset (run prepare first)") from None
    out = []
    with data:
        for i, meta in enumerate(index):
            if split is not None and meta["split"] != split:
                continue
            out.append(ImageSample(
                image=data[f"{i}/image"],
                mask=data[f"{i}/mask"],
                original_size=tuple(meta["original_size"]),
                id=meta["id"],
                split=meta["split"],
                mask_full=data[f"{i}/mask_full"] if f"{i}/mask_full" in data else None,
                fov_full=data[f"{i}/fov_full"] if f"{i}/fov_full" in data else None,
            ))
    return out


def split_train_val(samples, val_fraction=0.2, seed=0):
    """Hold out ``val_fraction`` of the training images (at least one) for validation.

    Samples already tagged ``val`` stay in validation; ``test`` samples are dropped.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    train = [s for s in samples if s.split == "train"]
    val = [s for s in samples if s.split == "val"]
    if not val:
        if len(train) < 2:
            raise ValueError("need at least two training images to hold out a validation set")
        n_val = max(1, int(round(val_fraction * len(train))))
        order = np.random.default_rng(seed).permutation(len(train))
        held = set(order[:n_val].tolist())
        val = [replace(s, split="val") for i, s in enumerate(train) if i in held]
        train = [s for i, s in enumerate(train) if i not in held]
    return train, val


class RetinalPreprocessor(TransformerMixin, BaseEstimator):
    """Grayscale -> gamma -> CLAHE chain as a scikit-learn transformer.

    Parameters
    ----------
    steps : tuple of str, default=("grayscale", "gamma", "clahe")
        Enabled steps; order is always the canonical one.
    gamma : float, default=1.7
    gamma_mode : {"brighten", "darken"}, default="brighten"
    clahe_tiles : tuple of int, default=(8, 8)
    clahe_clip : float, default=2.0
    clahe_bins : int, default=256
    """

    def __init__(self, steps=PREPROCESS_STEPS, gamma=DEFAULT_GAMMA, gamma_mode="brighten",
                 clahe_tiles=DEFAULT_CLAHE_TILES, clahe_clip=DEFAULT_CLAHE_CLIP,
                 clahe_bins=DEFAULT_CLAHE_BINS):
        self.steps = steps
        self.gamma = gamma
        self.gamma_mode = gamma_mode
        self.clahe_tiles = clahe_tiles
        self.clahe_clip = clahe_clip
        self.clahe_bins = clahe_bins

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        """Pre-process a batch ``(N, C, H, W)``; returns ``(N, 1, H, W)`` float32."""
        from .validation import check_images

        X = check_images(X)
        out = [
            preprocess(X[i : i + 1], self.steps, self.gamma, self.gamma_mode,
                       self.clahe_tiles, self.clahe_clip, self.clahe_bins)
            for i in range(X.shape[0])
        ]
        return np.concatenate(out, axis=0)
