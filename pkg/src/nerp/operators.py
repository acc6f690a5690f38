"""Differentiable 2D sensing operators and their exact adjoints.

CT: ray-driven parallel-beam projection with bilinear interpolation, the
matched transpose backprojection, and a filtered-backprojection baseline.
MRI: direct (exact) nonuniform DFT sampling of radial k-space spokes, the
conjugate-transpose adjoint, and ramp density compensation.

Direct summation is used instead of gridded fast transforms so that dense
matrix oracles can verify the operators exactly at small sizes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .images import image_values

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

RAY_STEP = 0.5  # ray sampling step in pixels
_CACHE_LIMIT = 3_000_000  # max cached interpolation entries per operator


class MeasurementFormatError(ValueError):
    """Raised when a measurement file cannot be parsed."""


@dataclass
class SamplingSpec:
    """Acquisition geometry and noise level for one modality."""

    modality: str  # "ct" | "mri"
    num_views_or_spokes: int
    detector_bins: int | None = None  # ct; defaults to ceil(sqrt(2) * N)
    samples_per_spoke: int | None = None  # mri; defaults to 2 * N
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.modality not in ("ct", "mri"):
            raise ValueError(f"modality must be 'ct' or 'mri', got {self.modality!r}")
        if self.num_views_or_spokes < 1:
            raise ValueError("need at least one view/spoke")
        if not math.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ValueError("noise_sigma must be finite and >= 0")


@dataclass
class SinogramData:
    """Parallel-beam line integrals over (angle, detector offset) bins."""

    angles: np.ndarray  # radians in [0, pi), strictly increasing
    offsets: np.ndarray  # pixels, uniformly spaced, symmetric about 0
    values: np.ndarray  # (num_angles, num_offsets)

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(np.diff(self.angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if self.angles.size and (self.angles[0] < 0 or self.angles[-1] >= np.pi):
            raise ValueError("angles must lie in [0, pi)")
        if self.offsets.size > 1:
            steps = np.diff(self.offsets)
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-9):
                raise ValueError("offsets must be uniformly spaced")
            if abs(self.offsets[0] + self.offsets[-1]) > 1e-9 * max(1.0, abs(self.offsets[-1])):
                raise ValueError("offsets must be symmetric about 0")
        if self.values.shape != (self.angles.size, self.offsets.size):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{self.angles.size} angles x {self.offsets.size} offsets"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram values must be finite")


@dataclass
class KSpaceData:
    """Complex nonuniform frequency samples with density weights."""

    coords: np.ndarray  # (M, 2) of (kx, ky) in cycles per field of view
    values: np.ndarray  # (M,) complex
    density_weights: np.ndarray  # (M,) nonnegative

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.complex128)
        self.density_weights = np.asarray(self.density_weights, dtype=np.float64)
        m = self.coords.shape[0]
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError("coords must have shape (M, 2)")
        if self.values.shape != (m,) or self.density_weights.shape != (m,):
            raise ValueError("values and density_weights must match coords")
        if not np.all(np.isfinite(np.abs(self.values))):
            raise ValueError("k-space values must be finite")
        if np.any(self.density_weights < 0):
            raise ValueError("density weights must be nonnegative")


def default_detector_bins(image_size: int) -> int:
    """Enough 1-pixel bins to cover the image diagonal."""
    return math.ceil(math.sqrt(2.0) * image_size)


def detector_offsets(num_bins: int, pitch: float = 1.0) -> np.ndarray:
    return (np.arange(num_bins) - (num_bins - 1) / 2.0) * pitch


def projection_angles(num_views: int) -> np.ndarray:
    """Angles equally distributed across a semicircle, starting at 0."""
    return np.arange(num_views) * np.pi / num_views


class RadonTransform:
    """Parallel-beam projector and its exact transpose on a square image.

    Rays are sampled every ``RAY_STEP`` pixels along their length; each
    sample gathers bilinear interpolation weights from its four neighbor
    pixels.  The adjoint scatters with identical weights, so the pair
    passes dot-product tests to floating precision.  Small geometries keep
    the interpolation table in memory; large ones recompute it per angle.
    """

    def __init__(self, image_size: int, angles, offsets=None, step: float = RAY_STEP):
        if image_size < 1:
            raise ValueError("image_size must be positive")
        self.image_size = int(image_size)
        self.angles = np.asarray(angles, dtype=np.float64)
        if offsets is None:
            offsets = detector_offsets(default_detector_bins(image_size))
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.step = float(step)
        half_diag = image_size * math.sqrt(2.0) / 2.0
        n_steps = math.ceil(2.0 * half_diag / step)
        self._t = -half_diag + (np.arange(n_steps) + 0.5) * step
        entries = self.angles.size * self.offsets.size * n_steps * 4
        self._cached = None
        if entries <= _CACHE_LIMIT:
            per_angle = [self._angle_table(a) for a in self.angles]
            self._cached = (
                np.stack([idx for idx, _ in per_angle]),
                np.stack([w for _, w in per_angle]),
            )

    @property
    def measurement_shape(self) -> tuple[int, int]:
        return (self.angles.size, self.offsets.size)

    def _angle_table(self, theta: float):
        n = self.image_size
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        s = self.offsets[:, None]
        t = self._t[None, :]
        x = s * cos_t - t * sin_t
        y = s * sin_t + t * cos_t
        col = x + (n - 1) / 2.0
        row = (n - 1) / 2.0 - y
        c0 = np.floor(col)
        r0 = np.floor(row)
        fc = col - c0
        fr = row - r0
        c0 = c0.astype(np.int64)
        r0 = r0.astype(np.int64)
        weights = np.stack(
            [(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=-1
        ) * self.step
        rows = np.stack([r0, r0, r0 + 1, r0 + 1], axis=-1)
        cols = np.stack([c0, c0 + 1, c0, c0 + 1], axis=-1)
        valid = (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
        idx = np.where(valid, rows * n + cols, 0).astype(np.int64)
        weights = np.where(valid, weights, 0.0)
        return idx, weights

    def forward(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        n = self.image_size
        if image.shape != (n, n):
            raise ValueError(f"expected image of shape ({n}, {n}), got {image.shape}")
        flat = image.ravel()
        if self._cached is not None:
            idx, w = self._cached
            return (w * flat[idx]).sum(axis=(2, 3))
        out = np.empty(self.measurement_shape)
        for i, theta in enumerate(self.angles):
            idx, w = self._angle_table(theta)
            out[i] = (w * flat[idx]).sum(axis=(1, 2))
        return out

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.measurement_shape:
            raise ValueError(
                f"expected values of shape {self.measurement_shape}, got {values.shape}"
            )
        n = self.image_size
        if self._cached is not None:
            idx, w = self._cached
            contrib = w * values[:, :, None, None]
            flat = np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=n * n)
            return flat.reshape(n, n)
        acc = np.zeros(n * n)
        for i, theta in enumerate(self.angles):
            idx, w = self._angle_table(theta)
            contrib = w * values[i][:, None, None]
            acc += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=n * n)
        return acc.reshape(n, n)


def radon_forward(image, spec: SamplingSpec) -> SinogramData:
    """Project a square 2D image into a sinogram (optionally with noise)."""
    img = image_values(image)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"radon_forward requires a square 2D image, got {img.shape}")
    if spec.modality != "ct":
        raise ValueError("radon_forward requires a ct sampling spec")
    n = img.shape[0]
    bins = spec.detector_bins or default_detector_bins(n)
    # The detector always spans the image diagonal; more bins means a finer
    # pitch (pitch is exactly 1 pixel at the default bin count).
    pitch = default_detector_bins(n) / bins
    op = RadonTransform(n, projection_angles(spec.num_views_or_spokes),
                        detector_offsets(bins, pitch))
    values = op.forward(img)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.noise_seed)
        values = values + rng.normal(0.0, spec.noise_sigma, size=values.shape)
    return SinogramData(op.angles, op.offsets, values)


def radon_adjoint(sino: SinogramData, image_shape) -> np.ndarray:
    """Exact transpose of the discrete forward projector."""
    n1, n2 = image_shape
    if n1 != n2:
        raise ValueError("radon_adjoint requires a square image shape")
    op = RadonTransform(n1, sino.angles, sino.offsets)
    return op.adjoint(sino.values)


def _ramp_filter(size: int, pitch: float) -> np.ndarray:
    # Band-limited spatial ramp kernel (value 1/4 at zero, -1/(pi*k)^2 at odd
    # lags); its DFT approximates |freq| without zeroing DC.
    kernel = np.zeros(size)
    kernel[0] = 0.25
    odd = np.arange(1, size // 2 + 1, 2)
    kernel[odd] = -1.0 / (np.pi * odd) ** 2
    kernel[-odd] = -1.0 / (np.pi * odd) ** 2
    return np.real(np.fft.fft(kernel)) / pitch


def fbp_reconstruct(sino: SinogramData, image_shape) -> np.ndarray:
    """Filtered backprojection: Ram-Lak filter, then interpolating backprojection."""
    n1, n2 = image_shape
    if n1 != n2:
        raise ValueError("fbp_reconstruct requires a square image shape")
    if sino.angles.size < 1:
        raise ValueError("need at least one projection angle")
    n = n1
    bins = sino.offsets.size
    pitch = float(sino.offsets[1] - sino.offsets[0]) if bins > 1 else 1.0

    padded = 1 << max(int(np.ceil(np.log2(2 * bins))), 6)
    filt = _ramp_filter(padded, pitch)[: padded // 2 + 1]
    filtered = np.fft.irfft(np.fft.rfft(sino.values, padded, axis=1) * filt, padded,
                            axis=1)[:, :bins]

    xs = np.arange(n) - (n - 1) / 2.0
    ys = (n - 1) / 2.0 - np.arange(n)
    xg, yg = np.meshgrid(xs, ys)
    recon = np.zeros((n, n))
    for i, theta in enumerate(sino.angles):
        t = xg * math.cos(theta) + yg * math.sin(theta)
        recon += np.interp(t.ravel(), sino.offsets, filtered[i], left=0.0,
                           right=0.0).reshape(n, n)
    return recon * (np.pi / sino.angles.size)


def golden_angle_spokes(num_spokes: int, samples_per_spoke: int,
                        grid_size: int) -> np.ndarray:
    """Radial sample coordinates; spoke k sits at angle k * pi * (3 - sqrt(5)) mod pi.

    Each spoke holds uniformly spaced samples along the diameter from
    -grid_size/2 (inclusive) towards +grid_size/2 (exclusive), passing
    through DC.  Returns an (num_spokes * samples_per_spoke, 2) array of
    (kx, ky) in cycles per field of view, spoke-major.
    """
    if num_spokes < 1 or samples_per_spoke < 1:
        raise ValueError("spoke counts must be positive")
    radii = (np.arange(samples_per_spoke) - samples_per_spoke // 2) * (
        grid_size / samples_per_spoke
    )
    angles = np.mod(np.arange(num_spokes) * GOLDEN_ANGLE, np.pi)
    kx = radii[None, :] * np.cos(angles)[:, None]
    ky = radii[None, :] * np.sin(angles)[:, None]
    return np.stack([kx.ravel(), ky.ravel()], axis=1)


def ramp_density_weights(coords: np.ndarray) -> np.ndarray:
    """Radial |k| weights, DC assigned half the smallest nonzero weight, sum 1."""
    coords = np.asarray(coords, dtype=np.float64)
    w = np.hypot(coords[:, 0], coords[:, 1])
    nonzero = w[w > 0]
    if nonzero.size == 0:
        return np.full(len(w), 1.0 / len(w))
    w = np.where(w > 0, w, 0.5 * nonzero.min())
    return w / w.sum()


class NudftOperator:
    """Exact type-2 nonuniform DFT on a 2D grid and its conjugate transpose.

    The M x (rows*cols) transform matrix is never materialized: phases
    factor into per-row and per-column terms so both directions reduce to
    one dense matrix product plus an elementwise combine.
    """

    def __init__(self, coords, image_shape):
        rows, cols = image_shape
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError("coords must have shape (M, 2)")
        kx, ky = coords[:, 0], coords[:, 1]
        if np.any(kx < -cols / 2) or np.any(kx >= cols / 2) or np.any(
            ky < -rows / 2
        ) or np.any(ky >= rows / 2):
            raise ValueError("sample coordinates outside the Nyquist band")
        self.coords = coords
        self.image_shape = (int(rows), int(cols))
        self._col_phase = np.exp(-2j * np.pi * np.outer(kx, np.arange(cols)) / cols)
        self._row_phase = np.exp(-2j * np.pi * np.outer(ky, np.arange(rows)) / rows)

    @property
    def num_samples(self) -> int:
        return self.coords.shape[0]

    def forward(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.image_shape:
            raise ValueError(
                f"expected image of shape {self.image_shape}, got {image.shape}"
            )
        u = image @ self._col_phase.T  # (rows, M)
        return np.einsum("mr,rm->m", self._row_phase, u)

    def adjoint(self, values: np.ndarray, weights=None) -> np.ndarray:
        values = np.asarray(values, dtype=np.complex128)
        if values.shape != (self.num_samples,):
            raise ValueError(
                f"expected {self.num_samples} sample values, got shape {values.shape}"
            )
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != values.shape:
                raise ValueError("weights must match sample count")
            values = values * weights
        g = self._row_phase.conj() * values[:, None]  # (M, rows)
        return (g.T @ self._col_phase.conj()).real


def nudft_forward(image, coords) -> np.ndarray:
    """Sample the image's spectrum at arbitrary in-band frequencies."""
    img = image_values(image)
    if img.ndim != 2:
        raise ValueError("nudft_forward expects a 2D image")
    return NudftOperator(coords, img.shape).forward(img)


def nudft_adjoint(samples: KSpaceData, image_shape,
                  apply_density_compensation: bool = False) -> np.ndarray:
    """Adjoint NUDFT; with compensation on, samples are ramp-weighted first."""
    op = NudftOperator(samples.coords, image_shape)
    weights = samples.density_weights if apply_density_compensation else None
    return op.adjoint(samples.values, weights)


def sample_kspace(image, spec: SamplingSpec) -> KSpaceData:
    """Acquire golden-angle radial k-space data from an image (optionally noisy)."""
    img = image_values(image)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"sample_kspace requires a square 2D image, got {img.shape}")
    if spec.modality != "mri":
        raise ValueError("sample_kspace requires an mri sampling spec")
    n = img.shape[0]
    per_spoke = spec.samples_per_spoke or 2 * n
    coords = golden_angle_spokes(spec.num_views_or_spokes, per_spoke, n)
    values = NudftOperator(coords, img.shape).forward(img)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.noise_seed)
        values = values + spec.noise_sigma * (
            rng.normal(size=values.shape) + 1j * rng.normal(size=values.shape)
        )
    return KSpaceData(coords, values, ramp_density_weights(coords))


# --- measurement file round-trips -------------------------------------------
#
# One file per measurement set: a single JSON header line (shape and
# geometry), then little-endian float64 payload segments.


def _write_payload(path: Path, header: dict, arrays: list[np.ndarray]) -> None:
    blob = json.dumps(header).encode("ascii") + b"\n"
    for arr in arrays:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(blob)


def _read_payload(path: Path, expect_kind: str) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise MeasurementFormatError(f"{path}: missing header line")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as exc:
        raise MeasurementFormatError(f"{path}: bad header: {exc}") from None
    if header.get("kind") != expect_kind:
        raise MeasurementFormatError(
            f"{path}: expected kind {expect_kind!r}, got {header.get('kind')!r}"
        )
    payload = np.frombuffer(data[nl + 1 :], dtype="<f8")
    return header, payload


def save_sinogram(sino: SinogramData, path) -> None:
    header = {
        "kind": "sinogram",
        "angles": sino.angles.tolist(),
        "offsets": sino.offsets.tolist(),
        "shape": list(sino.values.shape),
    }
    _write_payload(Path(path), header, [sino.values])


def load_sinogram(path) -> SinogramData:
    header, payload = _read_payload(Path(path), "sinogram")
    shape = tuple(header["shape"])
    if payload.size != np.prod(shape):
        raise MeasurementFormatError(
            f"{path}: expected {int(np.prod(shape))} values, got {payload.size}"
        )
    return SinogramData(np.array(header["angles"]), np.array(header["offsets"]),
                        payload.reshape(shape).copy())


def save_kspace(kspace: KSpaceData, path) -> None:
    header = {"kind": "kspace", "num_samples": int(len(kspace.values))}
    values_ri = np.stack([kspace.values.real, kspace.values.imag], axis=1)
    _write_payload(Path(path), header, [kspace.coords, values_ri,
                                        kspace.density_weights])


def load_kspace(path) -> KSpaceData:
    header, payload = _read_payload(Path(path), "kspace")
    m = int(header["num_samples"])
    if payload.size != 5 * m:
        raise MeasurementFormatError(
            f"{path}: expected {5 * m} floats for {m} samples, got {payload.size}"
        )
    coords = payload[: 2 * m].reshape(m, 2).copy()
    ri = payload[2 * m : 4 * m].reshape(m, 2)
    weights = payload[4 * m :].copy()
    return KSpaceData(coords, ri[:, 0] + 1j * ri[:, 1], weights)
