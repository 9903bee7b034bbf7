"""Low-frequency amplitude swap between a source and a target image (FDA core)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import DatasetManifest, LabeledImage, write_image


@dataclass
class SwapConfig:
    window_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.window_fraction <= 1.0:
            raise ValueError(f"window_fraction {self.window_fraction} outside [0, 1]")


def _band(n: int, fraction: float) -> np.ndarray:
    # frequencies |k| <= r with r = floor(f*n) // 2: an odd-sized band centred on DC,
    # closed under k -> -k so the spliced spectrum stays Hermitian
    width = int(np.floor(fraction * n))
    k = np.fft.fftfreq(n, d=1.0 / n)
    if width == 0:
        return np.zeros(n, dtype=bool)
    r = width // 2
    return np.abs(k) <= r


def low_frequency_window(shape: tuple[int, int], fraction: float) -> np.ndarray:
    """Boolean mask over the unshifted 2-D spectrum selecting the swapped window."""
    h, w = shape
    return np.outer(_band(h, fraction), _band(w, fraction))


def swap_amplitude(source: np.ndarray, target: np.ndarray, fraction: float) -> np.ndarray:
    """Complex inverse transform of ``source`` with its window amplitude taken from ``target``.

    Works on a single (H, W) channel; the result is complex so callers can check
    the imaginary residue.
    """
    fs, ft = np.fft.fft2(source), np.fft.fft2(target)
    amp, phase = np.abs(fs), np.angle(fs)
    win = low_frequency_window(source.shape, fraction)
    amp[win] = np.abs(ft)[win]
    return np.fft.ifft2(amp * np.exp(1j * phase))


def _resize_like(target: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if target.shape[:2] == shape:
        return target
    im = Image.fromarray(np.clip(np.round(target * 255), 0, 255).astype(np.uint8))
    return np.asarray(im.resize((shape[1], shape[0]), Image.BILINEAR), dtype=np.float64) / 255.0


def fourier_swap(source: np.ndarray, target: np.ndarray, config: SwapConfig | None = None) -> np.ndarray:
    """Give ``source`` (H, W, 3) the low-frequency amplitude spectrum of ``target``."""
    config = config or SwapConfig()
    source = np.asarray(source, dtype=np.float64)
    target = _resize_like(np.asarray(target, dtype=np.float64), source.shape[:2])
    if source.ndim != 3 or source.shape != target.shape:
        raise ValueError(f"shape mismatch: source {source.shape}, target {target.shape}")
    out = np.empty_like(source)
    for ch in range(source.shape[2]):
        out[..., ch] = swap_amplitude(source[..., ch], target[..., ch], config.window_fraction).real
    return np.clip(out, 0.0, 1.0)


def apply_to_manifest(
    source: DatasetManifest,
    target: DatasetManifest,
    config: SwapConfig,
    out_root,
    seed: int = 0,
) -> DatasetManifest:
    """Swap every source image against a uniformly drawn target image; masks are copied as-is."""
    out_root = Path(out_root)
    rng = np.random.default_rng(seed)
    target_ids = target.ids()
    entries = []
    for image_id in source.ids():
        img = source.load_image(image_id)
        style = target.load_image(target_ids[int(rng.integers(len(target_ids)))])
        pixels = fourier_swap(img.pixels, style.pixels, config)
        entries.append(write_image(out_root, LabeledImage(img.id, pixels, img.mask, "source")))
    manifest = DatasetManifest(list(source.class_names), entries, out_root)
    manifest.save()
    return manifest
