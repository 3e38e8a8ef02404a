"""
Rendering-error mathematics.

    L(v, v_hat) = (1 - lambda) * mean|v - v_hat| + lambda * (1 - SSIM(v, v_hat))

SSIM uses the usual 11x11 Gaussian window (sigma 1.5) with K1=0.01, K2=0.03
over a dynamic range of 1.0, evaluated at every valid window position of every
colour channel and averaged. The L1 term is the per-sample mean so that losses
are resolution independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel

from src.errors import DomainError
from src.link import end_to_end_latency

if TYPE_CHECKING:
    from src.instance import Instance

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
DYNAMIC_RANGE = 1.0

# (loss, PSNR dB) pairs measured for the edge and on-device models.
CALIBRATION_ANCHORS = ((0.029, 27.49), (0.041, 24.99))


@dataclass(frozen=True)
class Image:
    """RGB image with samples in [0, 1], stored as an (L, W, 3) float array."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=float)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DomainError(f"expected an (L, W, 3) array, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0 or pixels.max() > 1:
            raise DomainError("image samples must lie in [0, 1]")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @classmethod
    def from_samples(cls, samples, length: int, width: int) -> Image:
        """Build from a flat row-major sample vector of size 3*L*W."""
        flat = np.asarray(samples, dtype=float)
        if flat.size != 3 * length * width:
            raise DomainError(f"expected {3 * length * width} samples, got {flat.size}")
        return cls(flat.reshape(length, width, 3))

    @classmethod
    def constant(cls, value: float, length: int, width: int) -> Image:
        return cls(np.full((length, width, 3), float(value)))

    @property
    def length(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def samples(self) -> np.ndarray:
        return self.pixels.reshape(-1)


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    """Normalised 2-D Gaussian kernel."""
    axis = np.arange(size, dtype=float) - (size - 1) / 2
    profile = np.exp(-(axis**2) / (2 * sigma**2))
    kernel = np.outer(profile, profile)
    return kernel / kernel.sum()


def _check_pair(a: Image, b: Image) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise DomainError(f"image shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    if a.length < WINDOW_SIZE or a.width < WINDOW_SIZE:
        raise DomainError(
            f"images must be at least {WINDOW_SIZE}x{WINDOW_SIZE}, got {a.length}x{a.width}"
        )


def _filter(channel_stack: np.ndarray, window: np.ndarray) -> np.ndarray:
    views = sliding_window_view(channel_stack, window.shape, axis=(0, 1))
    return np.einsum("ijcuv,uv->ijc", views, window)


def ssim(a: Image, b: Image) -> float:
    """Mean SSIM over all valid window positions and channels."""
    _check_pair(a, b)
    window = gaussian_window()
    x, y = a.pixels, b.pixels

    mu_x = _filter(x, window)
    mu_y = _filter(y, window)
    mu_x_sq = mu_x * mu_x
    mu_y_sq = mu_y * mu_y
    mu_xy = mu_x * mu_y

    sigma_x_sq = _filter(x * x, window) - mu_x_sq
    sigma_y_sq = _filter(y * y, window) - mu_y_sq
    sigma_xy = _filter(x * y, window) - mu_xy

    c1 = (K1 * DYNAMIC_RANGE) ** 2
    c2 = (K2 * DYNAMIC_RANGE) ** 2
    ssim_map = ((2 * mu_xy + c1) * (2 * sigma_xy + c2)) / (
        (mu_x_sq + mu_y_sq + c1) * (sigma_x_sq + sigma_y_sq + c2)
    )
    return float(ssim_map.mean())


def _check_weight(weight: float) -> None:
    if not 0 <= weight < 1:
        raise DomainError(f"loss weight must lie in [0, 1), got {weight}")


def rendering_error(a: Image, b: Image, weight: float) -> float:
    """(1 - weight) * mean absolute error + weight * (1 - SSIM)."""
    _check_weight(weight)
    _check_pair(a, b)
    l1 = float(np.mean(np.abs(a.pixels - b.pixels)))
    if weight == 0:
        return l1
    return (1 - weight) * l1 + weight * (1 - ssim(a, b))


def switching_gain_from_images(edge_render: Image, local_render: Image, weight: float) -> float:
    """Discrepancy between the edge and on-device renders of the same pose."""
    return rendering_error(edge_render, local_render, weight)


def fit_psnr_calibration(
    anchors: tuple[tuple[float, float], ...] = CALIBRATION_ANCHORS,
) -> tuple[float, float]:
    """Solve PSNR = A + B*log10(loss) through two (loss, PSNR) anchors."""
    (l0, q0), (l1, q1) = anchors
    system = np.array([[1.0, math.log10(l0)], [1.0, math.log10(l1)]])
    intercept, slope = np.linalg.solve(system, np.array([q0, q1]))
    return float(intercept), float(slope)


PSNR_CALIB_A, PSNR_CALIB_B = fit_psnr_calibration()


def psnr_from_loss(
    loss, calib_a: float = PSNR_CALIB_A, calib_b: float = PSNR_CALIB_B
) -> float | np.ndarray:
    """Calibrated PSNR in dB for one or many loss values."""
    values = np.asarray(loss, dtype=float)
    if np.any(~np.isfinite(values)) or np.any(values <= 0):
        raise DomainError("loss must be finite and > 0")
    psnr = calib_a + calib_b * np.log10(values)
    return float(psnr) if psnr.ndim == 0 else psnr


class UserMetrics(BaseModel):
    user: int
    collaborate: bool
    loss: float
    psnr: float
    latency: float
    power: float


class SystemMetrics(BaseModel):
    """Whole-system quality and timeliness of one (x, p) decision."""

    total_loss: float
    mean_psnr: float
    max_latency: float
    per_user: list[UserMetrics]


def evaluate_solution(inst: Instance, x, p) -> SystemMetrics:
    """Score a decision against the latent quality profile attached to the instance."""
    quality = inst.quality
    if quality is None:
        raise DomainError("instance carries no quality profile; cannot score a solution")
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if x.shape != (inst.num_users,) or p.shape != (inst.num_users,):
        raise DomainError(f"expected vectors of length {inst.num_users}")

    loss_local = np.asarray(quality.loss_local)
    loss_edge = np.asarray(quality.loss_edge)
    selected_loss = (1 - x) * loss_local + x * loss_edge
    selected_psnr = (1 - x) * np.asarray(quality.psnr_local) + x * np.asarray(quality.psnr_edge)
    latency = np.asarray(
        end_to_end_latency(
            inst.gamma,
            inst.noise_array,
            inst.bandwidth_array,
            inst.volume_array,
            x,
            p,
            inst.edge_render_time,
            inst.local_render_time,
        ),
        dtype=float,
    )
    per_user = [
        UserMetrics(
            user=k,
            collaborate=bool(x[k] == 1),
            loss=float(selected_loss[k]),
            psnr=float(selected_psnr[k]),
            latency=float(latency[k]),
            power=float(p[k]),
        )
        for k in range(inst.num_users)
    ]
    return SystemMetrics(
        total_loss=float(np.sum(selected_loss)),
        mean_psnr=float(np.mean(selected_psnr)),
        max_latency=float(np.max(latency)),
        per_user=per_user,
    )


# Binary PPM (P6, 8-bit) is enough to score renders exported from any GS viewer.


def read_ppm(path: str | Path) -> Image:
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
        if pos >= len(data):
            raise DomainError(f"{path}: truncated PPM header")
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P6":
        raise DomainError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, length, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DomainError(f"{path}: malformed PPM header {tokens[1:]!r}") from None
    if maxval != 255:
        raise DomainError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    if width < 1 or length < 1:
        raise DomainError(f"{path}: empty image ({width}x{length})")
    expected = 3 * width * length
    if len(data) - pos < expected:
        raise DomainError(f"{path}: truncated raster, {max(len(data) - pos, 0)} of {expected} bytes")
    raster = np.frombuffer(data, dtype=np.uint8, count=expected, offset=pos)
    return Image(raster.reshape(length, width, 3).astype(float) / 255.0)


def write_ppm(image: Image, path: str | Path) -> None:
    raster = np.rint(image.pixels * 255.0).astype(np.uint8)
    header = f"P6\n{image.width} {image.length}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raster.tobytes())
