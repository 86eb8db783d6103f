"""Image preprocessing: bilinear resize, CLAHE, Gaussian blur, [0,1] scaling.

Images are numpy arrays in H x W x C layout, C in {1, 3}; byte images are
uint8, float images are float32 in [0, 1].  All byte-valued outputs round to
nearest with ties away from zero.  Every operation here is pure and
deterministic, so the whole chain maps identical bytes to identical floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class ClaheParams:
    """Tile grid, clip factor and histogram resolution for CLAHE.

    The per-tile clip limit is max(1, clip_factor * tile_pixels / bins).
    """

    tiles_x: int = 8
    tiles_y: int = 8
    clip_factor: float = 2.0
    bins: int = 256

    def validate(self) -> None:
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValueError(f"tile counts must be >= 1, got {self.tiles_x}x{self.tiles_y}")
        if self.clip_factor < 1.0:
            raise ValueError(f"clip_factor must be >= 1.0, got {self.clip_factor}")
        if self.bins != 256:
            raise ValueError("histogram bins are fixed at 256 for byte images")


def round_u8(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero, clipped to [0, 255]."""
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def _require_image(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected H x W x C image with C in {{1,3}}, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image has zero-sized dimension: {img.shape}")
    return img


# -- resize ----------------------------------------------------------------


def resize_bilinear_f32(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a float H x W (x C) array, half-pixel centers, edge clamp."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output dims must be >= 1, got {out_h}x{out_w}")
    if h < 1 or w < 1:
        raise ValueError(f"input has zero-sized dimension: {img.shape}")

    src_y = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    src_x = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    fy = src_y - y0
    fx = src_x - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)

    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0c][:, x0c] * (1.0 - fx) + img[y0c][:, x1c] * fx
    bot = img[y1c][:, x0c] * (1.0 - fx) + img[y1c][:, x1c] * fx
    out = top * (1.0 - fy) + bot * fy
    return out[:, :, 0] if squeeze else out


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a byte image with bilinear interpolation (half-pixel-center convention)."""
    img = _require_image(img)
    out = resize_bilinear_f32(img.astype(np.float64), out_h, out_w)
    return round_u8(out)


# -- CLAHE -------------------------------------------------------------------


def clip_histogram(hist: np.ndarray, clip_limit: int) -> np.ndarray:
    """Clip bins at the limit and spread the excess uniformly (single pass).

    The floor share goes to every bin; the remainder lands one count each in
    the first ``excess % bins`` bins, so no bin ends above
    clip_limit + ceil(excess / bins).
    """
    clipped = np.minimum(hist, clip_limit)
    excess = int(hist.sum() - clipped.sum())
    bins = hist.size
    clipped += excess // bins
    rem = excess % bins
    clipped[:rem] += 1
    return clipped


def _tile_edges(extent: int, tiles: int) -> np.ndarray:
    """Integer tile boundaries covering [0, extent), remainder spread evenly."""
    return np.round(np.linspace(0, extent, tiles + 1)).astype(np.int64)


def _clahe_gray(plane: np.ndarray, params: ClaheParams) -> np.ndarray:
    h, w = plane.shape
    ty, tx = params.tiles_y, params.tiles_x
    if h < ty or w < tx:
        raise ValueError(
            f"image {h}x{w} is smaller than the {ty}x{tx} tile grid; use fewer tiles"
        )
    bins = params.bins
    y_edges = _tile_edges(h, ty)
    x_edges = _tile_edges(w, tx)

    # Per-tile clipped-CDF mappings, as byte LUTs.
    luts = np.empty((ty, tx, bins), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            tile = plane[y_edges[i]:y_edges[i + 1], x_edges[j]:x_edges[j + 1]]
            n_pix = tile.size
            clip_limit = max(1, int(params.clip_factor * n_pix / bins))
            hist = np.bincount(tile.reshape(-1), minlength=bins)
            hist = clip_histogram(hist, clip_limit)
            cdf = np.cumsum(hist) / n_pix
            luts[i, j] = cdf * (bins - 1)

    # Bilinear interpolation between the four surrounding tile mappings,
    # replicated at the borders.
    cy = (y_edges[:-1] + y_edges[1:] - 1) / 2.0
    cx = (x_edges[:-1] + x_edges[1:] - 1) / 2.0

    def interp_weights(coords: np.ndarray, centers: np.ndarray):
        hi = np.searchsorted(centers, coords, side="right")
        lo = np.clip(hi - 1, 0, centers.size - 1)
        hi = np.clip(hi, 0, centers.size - 1)
        span = centers[hi] - centers[lo]
        frac = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
        return lo, hi, frac

    ylo, yhi, wy = interp_weights(np.arange(h, dtype=np.float64), cy)
    xlo, xhi, wx = interp_weights(np.arange(w, dtype=np.float64), cx)

    v = plane.astype(np.int64)
    yl = ylo[:, None]
    yh = yhi[:, None]
    xl = xlo[None, :]
    xh = xhi[None, :]
    m_tl = luts[yl, xl, v]
    m_tr = luts[yl, xh, v]
    m_bl = luts[yh, xl, v]
    m_br = luts[yh, xh, v]
    wy = wy[:, None]
    wx = wx[None, :]
    out = (1 - wy) * ((1 - wx) * m_tl + wx * m_tr) + wy * ((1 - wx) * m_bl + wx * m_br)
    return round_u8(out)


def _rgb_to_luma_u8(img: np.ndarray) -> np.ndarray:
    """Integer BT.601 luma: (77 R + 150 G + 29 B + 128) >> 8."""
    r = img[:, :, 0].astype(np.int64)
    g = img[:, :, 1].astype(np.int64)
    b = img[:, :, 2].astype(np.int64)
    return ((77 * r + 150 * g + 29 * b + 128) >> 8).astype(np.uint8)


def clahe(img: np.ndarray, params: ClaheParams | None = None) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Color images are converted to BT.601 luma/chroma; only luma is equalized,
    then the channels are recombined, so hue is preserved.
    """
    params = params or ClaheParams()
    params.validate()
    img = _require_image(img)
    if img.dtype != np.uint8:
        raise ValueError(f"clahe expects a uint8 image, got dtype {img.dtype}")

    if img.shape[2] == 1:
        return _clahe_gray(img[:, :, 0], params)[:, :, None]

    y = _rgb_to_luma_u8(img)
    y_eq = _clahe_gray(y, params).astype(np.float64)
    rgb = img.astype(np.float64)
    cb = -0.168736 * rgb[:, :, 0] - 0.331264 * rgb[:, :, 1] + 0.5 * rgb[:, :, 2]
    cr = 0.5 * rgb[:, :, 0] - 0.418688 * rgb[:, :, 1] - 0.081312 * rgb[:, :, 2]
    out = np.empty_like(rgb)
    out[:, :, 0] = y_eq + 1.402 * cr
    out[:, :, 1] = y_eq - 0.344136 * cb - 0.714136 * cr
    out[:, :, 2] = y_eq + 1.772 * cb
    return round_u8(out)


# -- Gaussian blur ---------------------------------------------------------


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    """Symmetric 1-D Gaussian kernel normalized to sum 1."""
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    half = kernel_size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve1d_replicate(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = kernel.size // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (half, half)
    padded = np.pad(img, pad, mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for i, kv in enumerate(kernel):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(i, i + img.shape[axis])
        out += kv * padded[tuple(sl)]
    return out


def gaussian_blur_f32(img: np.ndarray, kernel_size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur on a float array, replicate borders."""
    k = gaussian_kernel1d(kernel_size, sigma)
    out = _convolve1d_replicate(img.astype(np.float64), k, axis=0)
    out = _convolve1d_replicate(out, k, axis=1)
    return out


def gaussian_blur(img: np.ndarray, kernel_size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Gaussian blur of a byte image; channels filtered independently."""
    img = _require_image(img)
    return round_u8(gaussian_blur_f32(img, kernel_size, sigma))


# -- scaling ----------------------------------------------------------------


def normalize01(img: np.ndarray) -> np.ndarray:
    """Map byte samples v to v / 255 as float32."""
    img = _require_image(img)
    return (img.astype(np.float32)) / np.float32(255.0)


def preprocess_chain(
    img: np.ndarray,
    out_h: int,
    out_w: int,
    clahe_params: ClaheParams | None = None,
    blur_kernel: int = 5,
    blur_sigma: float = 1.0,
) -> np.ndarray:
    """resize -> CLAHE -> Gaussian blur, returning the byte image.

    The final [0,1] scaling is applied by ``normalize01`` at load time.
    """
    out = resize_bilinear(img, out_h, out_w)
    out = clahe(out, clahe_params)
    out = gaussian_blur(out, blur_kernel, blur_sigma)
    return out


# -- file I/O ----------------------------------------------------------------

_PNM_MAGIC = {b"P5": 1, b"P6": 3}


def read_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG / PPM (P6) / PGM (P5) file into an H x W x C uint8 array."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        return _read_pnm(path)
    if suffix == ".png":
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.uint8)
        return _require_image(arr)
    raise ValueError(f"unsupported image format: {path.name}")


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write a uint8 image as PNG, binary PPM or PGM, chosen by extension."""
    path = Path(path)
    img = _require_image(img)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        _write_pnm(path, img)
        return
    if suffix == ".png":
        data = img[:, :, 0] if img.shape[2] == 1 else img
        Image.fromarray(data, mode="L" if img.shape[2] == 1 else "RGB").save(path, format="PNG")
        return
    raise ValueError(f"unsupported image format: {path.name}")


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    magic = raw[:2]
    if magic not in _PNM_MAGIC:
        raise ValueError(f"{path.name}: not a binary PGM/PPM file (magic {magic!r})")
    channels = _PNM_MAGIC[magic]
    # Header tokens: width, height, maxval; '#' comments allowed.
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path.name}: truncated PNM header")
        tokens.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{path.name}: only maxval 255 supported, got {maxval}")
    n = w * h * channels
    body = raw[pos:pos + n]
    if len(body) != n:
        raise ValueError(f"{path.name}: expected {n} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels).copy()


def _write_pnm(path: Path, img: np.ndarray) -> None:
    h, w, c = img.shape
    if c == 1:
        header = b"P5 " + f"{w} {h} 255\n".encode("ascii")
    else:
        header = b"P6 " + f"{w} {h} 255\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(img).tobytes())
