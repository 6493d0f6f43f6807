"""Degradation simulation, patch datasets, sliding-window restoration, PSNR.

Images are 2D float arrays on the 0..255 scale (``peak`` records the
nominal maximum).  Degradation follows the linear-Gaussian model
z = A x + noise and is NOT clipped to the pixel range; restored images
are clipped only for display and metrics.  All randomness is seeded.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .linops import CirculantOp, uniform_kernel
from .network import network_forward

__all__ = [
    "ImageTensor",
    "DegradationSpec",
    "PatchPairSet",
    "degrade",
    "degrade_patches",
    "extract_patches",
    "build_pair_set",
    "restore",
    "psnr",
    "read_pgm",
    "write_pgm",
    "load_image",
    "write_image",
    "list_images",
    "synthetic_image",
]

PSNR_CAP_DB = 99.0


@dataclass
class ImageTensor:
    """A 2D grayscale image with its nominal peak value."""

    pixels: np.ndarray
    peak: float = 255.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be 2D, got shape %r" % (self.pixels.shape,))
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("pixels must be finite")
        if self.peak <= 0:
            raise ValueError("peak must be positive")

    @property
    def shape(self):
        return self.pixels.shape

    def copy(self):
        return ImageTensor(self.pixels.copy(), self.peak)

    def clipped(self):
        """Copy with pixels clipped to [0, peak]."""
        return ImageTensor(np.clip(self.pixels, 0.0, self.peak), self.peak)


@dataclass
class DegradationSpec:
    """Blur width (3 or 5, or a custom kernel) plus noise level and seed."""

    blur: object = 3
    alpha: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not isinstance(self.blur, (int, np.integer)):
            self.blur = np.asarray(self.blur, dtype=float)

    def kernel(self):
        if isinstance(self.blur, np.ndarray):
            return self.blur
        return uniform_kernel(int(self.blur))

    def build_op(self, shape):
        return CirculantOp(self.kernel(), shape)

    def label(self):
        if isinstance(self.blur, np.ndarray):
            return "custom/alpha%g" % self.alpha
        return "blur%d/alpha%g" % (self.blur, self.alpha)


def degrade(image, spec, op=None, rng=None):
    """Apply z = A x + noise.  Output is not clipped to the pixel range."""
    if op is None:
        op = spec.build_op(image.shape)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    out = op.apply(image.pixels)
    if spec.alpha > 0:
        out = out + spec.alpha * rng.standard_normal(image.shape)
    return ImageTensor(out, image.peak)


def degrade_patches(patches, spec, patch_side, rng=None):
    """Degrade flattened patches with per-patch circulant blur plus noise.

    Each row is treated as its own periodic patch_side x patch_side image,
    so the blur wraps inside the patch exactly like the network's operator.
    """
    patches = np.atleast_2d(np.asarray(patches, dtype=float))
    n = patch_side * patch_side
    if patches.shape[1] != n:
        raise ValueError("rows of length %d, expected %d" % (patches.shape[1], n))
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    op = spec.build_op((patch_side, patch_side))
    stack = patches.reshape(-1, patch_side, patch_side)
    blurred = np.fft.ifft2(np.fft.fft2(stack, axes=(-2, -1)) * op.spectrum,
                           axes=(-2, -1)).real
    out = blurred.reshape(patches.shape)
    if spec.alpha > 0:
        out = out + spec.alpha * rng.standard_normal(out.shape)
    return out


@dataclass
class PatchPairSet:
    """Aligned clean/degraded flattened patches plus provenance metadata."""

    clean: np.ndarray
    degraded: np.ndarray
    patch_side: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.clean = np.atleast_2d(np.asarray(self.clean, dtype=float))
        self.degraded = np.atleast_2d(np.asarray(self.degraded, dtype=float))
        if self.clean.shape != self.degraded.shape:
            raise ValueError("clean %r and degraded %r differ"
                             % (self.clean.shape, self.degraded.shape))
        if self.clean.shape[1] != self.patch_side ** 2:
            raise ValueError("patch length %d does not match side %d"
                             % (self.clean.shape[1], self.patch_side))

    def __len__(self):
        return self.clean.shape[0]

    def subset(self, indices):
        return PatchPairSet(self.clean[indices], self.degraded[indices],
                            self.patch_side, dict(self.meta))

    def save(self, path):
        np.savez(path, clean=self.clean, degraded=self.degraded,
                 patch_side=np.int64(self.patch_side),
                 meta_json=json.dumps(self.meta))

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            return cls(data["clean"], data["degraded"],
                       int(data["patch_side"]),
                       json.loads(str(data["meta_json"])))


def extract_patches(clean, degraded, count, patch_side, seed=0, rng=None):
    """Crop aligned random patches from a clean/degraded image pair."""
    if clean.shape != degraded.shape:
        raise ValueError("images must share a shape")
    h, w = clean.shape
    if patch_side > h or patch_side > w:
        raise ValueError("patch side %d exceeds image %dx%d" % (patch_side, h, w))
    if rng is None:
        rng = np.random.default_rng(seed)
    rows = rng.integers(0, h - patch_side + 1, size=count)
    cols = rng.integers(0, w - patch_side + 1, size=count)
    n = patch_side * patch_side
    out_clean = np.empty((count, n))
    out_deg = np.empty((count, n))
    for i in range(count):
        r, c = rows[i], cols[i]
        out_clean[i] = clean.pixels[r:r + patch_side, c:c + patch_side].ravel()
        out_deg[i] = degraded.pixels[r:r + patch_side, c:c + patch_side].ravel()
    meta = {"count": int(count), "patch_side": int(patch_side), "seed": int(seed)}
    return PatchPairSet(out_clean, out_deg, patch_side, meta)


def build_pair_set(images, spec, count, patch_side, pipeline="global", seed=0):
    """Sample a training set of patch pairs from a list of clean images.

    pipeline "global": degrade each full image once, then crop aligned
    pairs, so blur couples neighboring patches as it would in a real
    acquisition.  pipeline "perpatch": crop clean patches and degrade each
    one with the patch-sized periodic blur, exactly matching the operator
    the network assumes internally.
    """
    if pipeline not in ("global", "perpatch"):
        raise ValueError("pipeline must be global or perpatch")
    if not images:
        raise ValueError("no source images")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(images), size=count)
    n = patch_side * patch_side
    out_clean = np.empty((count, n))
    out_deg = np.empty((count, n))
    if pipeline == "global":
        noise_rng = np.random.default_rng(spec.seed)
        degraded_images = [degrade(img, spec, rng=noise_rng) for img in images]
        for i, j in enumerate(picks):
            img, dimg = images[j], degraded_images[j]
            h, w = img.shape
            if patch_side > h or patch_side > w:
                raise ValueError("patch side %d exceeds image %dx%d"
                                 % (patch_side, h, w))
            r = rng.integers(0, h - patch_side + 1)
            c = rng.integers(0, w - patch_side + 1)
            out_clean[i] = img.pixels[r:r + patch_side, c:c + patch_side].ravel()
            out_deg[i] = dimg.pixels[r:r + patch_side, c:c + patch_side].ravel()
    else:
        for i, j in enumerate(picks):
            img = images[j]
            h, w = img.shape
            if patch_side > h or patch_side > w:
                raise ValueError("patch side %d exceeds image %dx%d"
                                 % (patch_side, h, w))
            r = rng.integers(0, h - patch_side + 1)
            c = rng.integers(0, w - patch_side + 1)
            out_clean[i] = img.pixels[r:r + patch_side, c:c + patch_side].ravel()
        noise_rng = np.random.default_rng(spec.seed)
        out_deg[:] = degrade_patches(out_clean, spec, patch_side, rng=noise_rng)
    meta = {"count": int(count), "patch_side": int(patch_side),
            "pipeline": pipeline, "seed": int(seed),
            "degradation": spec.label(), "degradation_seed": int(spec.seed),
            "blur": ("custom" if isinstance(spec.blur, np.ndarray)
                     else int(spec.blur)),
            "alpha": float(spec.alpha),
            "images": len(images)}
    return PatchPairSet(out_clean, out_deg, patch_side, meta)


def _window_starts(length, patch_side, stride):
    starts = list(range(0, length - patch_side + 1, stride))
    if starts[-1] != length - patch_side:
        starts.append(length - patch_side)  # right/bottom aligned remainder
    return starts


def restore(net, degraded, mode="averaged", stride=None, chunk=4096):
    """Slide the network over a degraded image and stitch the patches.

    mode "independent" tiles with stride = patch_side; mode "averaged"
    overlaps windows (default stride 1) and averages per pixel.  Remainder
    windows are right/bottom aligned, and per-pixel counts normalize any
    extra contributions, so both modes cover every pixel exactly once or
    more.  Output is not clipped.
    """
    ps = net.design.patch_side
    h, w = degraded.shape
    if h < ps or w < ps:
        raise ValueError("image %dx%d smaller than patch %d" % (h, w, ps))
    if mode == "independent":
        if stride is not None and stride != ps:
            raise ValueError("independent mode uses stride = patch side")
        stride = ps
    elif mode == "averaged":
        stride = 1 if stride is None else int(stride)
        if not 1 <= stride <= ps:
            raise ValueError("stride must be in [1, %d]" % ps)
    else:
        raise ValueError("mode must be independent or averaged")

    rstarts = _window_starts(h, ps, stride)
    cstarts = _window_starts(w, ps, stride)
    corners = [(r, c) for r in rstarts for c in cstarts]
    sums = np.zeros((h, w))
    counts = np.zeros((h, w))
    pix = degraded.pixels
    for lo in range(0, len(corners), chunk):
        block = corners[lo:lo + chunk]
        z = np.stack([pix[r:r + ps, c:c + ps].ravel() for r, c in block])
        x_hat, _ = network_forward(net, z, with_caches=False)
        for (r, c), patch in zip(block, x_hat):
            sums[r:r + ps, c:c + ps] += patch.reshape(ps, ps)
            counts[r:r + ps, c:c + ps] += 1.0
    assert counts.min() >= 1.0
    return ImageTensor(sums / counts, degraded.peak)


def psnr(reference, test):
    """10 log10(peak^2 / MSE) in dB, capped at 99 (exact match sentinel)."""
    if reference.shape != test.shape:
        raise ValueError("shape mismatch %r vs %r" % (reference.shape, test.shape))
    mse = float(np.mean((reference.pixels - test.pixels) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    value = 10.0 * np.log10(reference.peak ** 2 / mse)
    return float(min(value, PSNR_CAP_DB))


def read_pgm(path):
    """Read a binary 8-bit PGM (P5); round-trips bit-exactly with write_pgm."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise ValueError("truncated PGM header in %s" % path)
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    if tokens[0] != b"P5":
        raise ValueError("%s is not a binary PGM (P5)" % path)
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if not 0 < maxval <= 255:
        raise ValueError("only 8-bit PGM supported, maxval=%d" % maxval)
    i += 1  # single whitespace byte after maxval
    raster = data[i:i + width * height]
    if len(raster) != width * height:
        raise ValueError("truncated PGM raster in %s" % path)
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return ImageTensor(pixels.astype(float), 255.0)


def write_pgm(image, path):
    """Write clipped, rounded pixels as binary 8-bit PGM (P5)."""
    pixels = np.clip(np.rint(image.pixels), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())


def load_image(path):
    """Read a grayscale image (PGM or PNG) as an ImageTensor on 0..255."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        return read_pgm(path)
    if ext == ".png":
        from PIL import Image
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("L"), dtype=float)
        return ImageTensor(pixels, 255.0)
    raise ValueError("unsupported image format %r" % ext)


def write_image(image, path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        write_pgm(image, path)
        return
    if ext == ".png":
        from PIL import Image
        pixels = np.clip(np.rint(image.pixels), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(path)
        return
    raise ValueError("unsupported image format %r" % ext)


def list_images(directory):
    """Sorted paths of PGM/PNG files directly under a directory."""
    names = sorted(os.listdir(directory))
    return [os.path.join(directory, n) for n in names
            if os.path.splitext(n)[1].lower() in (".pgm", ".png")]


def synthetic_image(side=180, seed=0):
    """A structured grayscale test scene: gradients, shapes, and texture.

    Piecewise-smooth regions with sharp edges, so blur and noise do visible
    damage and patch statistics resemble natural images.
    """
    rng = np.random.default_rng(seed)
    r = np.arange(side)[:, None]
    c = np.arange(side)[None, :]
    img = 90.0 + 70.0 * r / side + 30.0 * c / side

    for _ in range(6):  # rectangles
        rh = int(rng.integers(side // 8, side // 3))
        rw = int(rng.integers(side // 8, side // 3))
        r0 = int(rng.integers(0, side - rh))
        c0 = int(rng.integers(0, side - rw))
        img[r0:r0 + rh, c0:c0 + rw] += rng.uniform(-80, 80)

    for _ in range(4):  # discs
        rad = int(rng.integers(side // 12, side // 5))
        cr = int(rng.integers(rad, side - rad))
        cc = int(rng.integers(rad, side - rad))
        disc = (r - cr) ** 2 + (c - cc) ** 2 <= rad * rad
        img[disc] += rng.uniform(-70, 70)

    # one textured band
    band = slice(int(side * 0.7), int(side * 0.85))
    img[band, :] += 25.0 * np.sin(2 * np.pi * c / 9.0)

    img += 2.0 * rng.standard_normal((side, side))  # mild grain
    return ImageTensor(np.clip(img, 0.0, 255.0), 255.0)
