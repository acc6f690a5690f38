"""Synthetic longitudinal phantoms and grayscale image file I/O.

A "longitudinal pair" is a base phantom (the prior exam) plus the same
phantom with one or more elliptical lesions added (the follow-up exam),
so reconstruction experiments can check that measured changes are
recovered rather than copied from the prior.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .images import ImageGrid

# Modified (high-contrast) Shepp-Logan table:
# (additive value, semi-axis a, semi-axis b, x0, y0, rotation degrees)
SHEPP_LOGAN_ELLIPSES = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]

PGM_MAXVAL = 65535


class ImageFormatError(ValueError):
    """Raised when an image file cannot be parsed."""


@dataclass
class LesionSpec:
    """Elliptical intensity perturbation.

    ``center`` is the per-axis fractional position in [0, 1]^2 using array
    axis order (row fraction, column fraction); ``axes`` are the semi-axes
    as fractions of the image side; ``angle`` is the rotation in radians;
    ``delta_intensity`` is added inside the ellipse and the result is
    clamped to [0, 1].
    """

    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float = 0.0
    delta_intensity: float = 0.0

    def __post_init__(self):
        if min(self.axes) <= 0:
            raise ValueError("lesion axes must be positive")
        if not -1.0 <= self.delta_intensity <= 1.0:
            raise ValueError("delta_intensity must lie in [-1, 1]")


def shepp_logan(size: int, subsamples: int = 4) -> ImageGrid:
    """Modified Shepp-Logan phantom with intensities in [0, 1].

    Ellipse membership is evaluated at ``subsamples^2`` points per pixel and
    averaged, so edge pixels carry fractional coverage.  The [-1, 1]^2 field
    has the y axis pointing up, which puts the three small ellipses at the
    bottom of the image.
    """
    if size < 8:
        raise ValueError("phantom size must be at least 8")
    n = size * subsamples
    xs = (np.arange(n) + 0.5) * (2.0 / n) - 1.0
    ys = 1.0 - (np.arange(n) + 0.5) * (2.0 / n)
    xg, yg = np.meshgrid(xs, ys)

    img = np.zeros((n, n))
    for value, a, b, x0, y0, phi_deg in SHEPP_LOGAN_ELLIPSES:
        phi = math.radians(phi_deg)
        dx = xg - x0
        dy = yg - y0
        u = dx * math.cos(phi) + dy * math.sin(phi)
        v = -dx * math.sin(phi) + dy * math.cos(phi)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    img = img.reshape(size, subsamples, size, subsamples).mean(axis=(1, 3))
    return ImageGrid(np.clip(img, 0.0, 1.0), source_range=(0.0, 1.0))


def lesion_mask(shape: tuple[int, int], lesion: LesionSpec) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the lesion ellipse."""
    rows = (np.arange(shape[0]) + 0.5) / shape[0]
    cols = (np.arange(shape[1]) + 0.5) / shape[1]
    rg, cg = np.meshgrid(rows, cols, indexing="ij")
    dr = rg - lesion.center[0]
    dc = cg - lesion.center[1]
    cos_t = math.cos(lesion.angle)
    sin_t = math.sin(lesion.angle)
    u = dr * cos_t + dc * sin_t
    v = -dr * sin_t + dc * cos_t
    return (u / lesion.axes[0]) ** 2 + (v / lesion.axes[1]) ** 2 <= 1.0


def perturb_lesion(img: ImageGrid, lesion: LesionSpec) -> ImageGrid:
    """Add ``delta_intensity`` inside the lesion ellipse, clamped to [0, 1].

    Pixels outside the ellipse are bitwise unchanged.
    """
    values = img.values
    if values.ndim != 2:
        raise ValueError("perturb_lesion expects a 2D image")
    out = values.copy()
    mask = lesion_mask(values.shape, lesion)
    out[mask] = np.clip(out[mask] + lesion.delta_intensity, 0.0, 1.0)
    return ImageGrid(out, source_range=img.source_range)


def save_image(img: ImageGrid, path, fmt: str = "raw_f64") -> None:
    path = Path(path)
    if fmt == "raw_f64":
        _save_raw(img, path)
    elif fmt == "pgm":
        _save_pgm(img, path)
    elif fmt == "png":
        _save_png(img, path)
    else:
        raise ValueError(f"unknown image format {fmt!r}")


def load_image(path, fmt: str = "raw_f64") -> ImageGrid:
    path = Path(path)
    if fmt == "raw_f64":
        return _load_raw(path)
    if fmt == "pgm":
        return _load_pgm(path)
    if fmt == "png":
        return _load_png(path)
    raise ValueError(f"unknown image format {fmt!r}")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _save_raw(img: ImageGrid, path: Path) -> None:
    values = np.ascontiguousarray(img.values, dtype="<f8")
    header = {
        "shape": list(values.shape),
        "dtype": "<f8",
        "source_range": list(img.source_range) if img.source_range else None,
    }
    path.write_bytes(values.tobytes())
    _sidecar(path).write_text(json.dumps(header))


def _load_raw(path: Path) -> ImageGrid:
    try:
        header = json.loads(_sidecar(path).read_text())
    except FileNotFoundError:
        raise ImageFormatError(f"missing sidecar {_sidecar(path)}") from None
    except json.JSONDecodeError as exc:
        raise ImageFormatError(f"bad sidecar {_sidecar(path)}: {exc}") from None
    shape = tuple(header["shape"])
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ImageFormatError(
            f"{path}: expected {expected} payload bytes, file ends at byte {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f8").reshape(shape)
    rng = header.get("source_range")
    return ImageGrid(values.copy(), source_range=tuple(rng) if rng else None)


def _quantize(img: ImageGrid) -> tuple[np.ndarray, float, float]:
    values = img.values
    lo = float(values.min())
    hi = float(values.max())
    if hi > lo:
        q = np.round((values - lo) / (hi - lo) * PGM_MAXVAL)
    else:
        q = np.zeros_like(values)
    return q.astype(np.uint16), lo, hi


def _dequantize(q: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi > lo:
        return q.astype(np.float64) / PGM_MAXVAL * (hi - lo) + lo
    return np.full(q.shape, lo, dtype=np.float64)


def _save_pgm(img: ImageGrid, path: Path) -> None:
    if img.values.ndim != 2:
        raise ValueError("pgm supports 2D images only")
    q, lo, hi = _quantize(img)
    header = f"P5\n# scale {lo!r} {hi!r}\n{q.shape[1]} {q.shape[0]}\n{PGM_MAXVAL}\n"
    # P5 with maxval > 255 stores big-endian 16-bit samples.
    path.write_bytes(header.encode("ascii") + q.astype(">u2").tobytes())


def _load_pgm(path: Path) -> ImageGrid:
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise ImageFormatError(f"{path}: not a P5 pgm (byte 0)")
    tokens = []
    scale = None
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError(f"{path}: unterminated comment at byte {pos}")
            comment = data[pos + 1 : end].split()
            if len(comment) == 3 and comment[0] == b"scale":
                scale = (float(comment[1]), float(comment[2]))
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise ImageFormatError(f"{path}: truncated header at byte {pos}")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric header near byte {pos}") from None
    if maxval != PGM_MAXVAL:
        raise ImageFormatError(f"{path}: expected maxval {PGM_MAXVAL}, got {maxval}")
    expected = width * height * 2
    payload = data[pos:]
    if len(payload) != expected:
        raise ImageFormatError(
            f"{path}: expected {expected} payload bytes at byte {pos}, got {len(payload)}"
        )
    q = np.frombuffer(payload, dtype=">u2").reshape(height, width)
    lo, hi = scale if scale is not None else (0.0, 1.0)
    return ImageGrid(_dequantize(q, lo, hi), source_range=(lo, hi))


def _save_png(img: ImageGrid, path: Path) -> None:
    if img.values.ndim != 2:
        raise ValueError("png supports 2D images only")
    q, lo, hi = _quantize(img)
    info = PngInfo()
    info.add_text("scale", f"{lo!r} {hi!r}")
    Image.fromarray(q).save(path, format="PNG", pnginfo=info)


def _load_png(path: Path) -> ImageGrid:
    try:
        with Image.open(path) as im:
            im.load()
            text = getattr(im, "text", {})
            q = np.asarray(im, dtype=np.uint16)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from None
    if "scale" in text:
        lo, hi = (float(t) for t in text["scale"].split())
    else:
        lo, hi = 0.0, 1.0
    return ImageGrid(_dequantize(q, lo, hi), source_range=(lo, hi))
