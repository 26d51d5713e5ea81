"""Zero-phase FFT-domain filtering and trend/residual decomposition.

All filters share the same amplitude-only response family: a smooth
low-pass gain ``1/sqrt(1 + (f/f_c)^(2r))`` and the band-pass gain built
from two of them. Filtering is done by multiplying the one-sided FFT of
a reflection-padded signal by the response and transforming back, so it
is linear, shape-preserving, and differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class FilterSpec:
    """Cutoffs and order of the filter bank.

    f_c: trend cutoff (Hz). f_c_dn: denoising cutoff (Hz). Both must sit
    strictly below the Nyquist frequency.
    """

    f_c: float
    f_c_dn: float
    sample_rate: float
    r: int = 8

    def __post_init__(self):
        if not (0.0 < self.f_c <= self.f_c_dn < self.sample_rate / 2.0):
            raise ValueError(
                f"cutoffs must satisfy 0 < f_c <= f_c_dn < Nyquist, got "
                f"f_c={self.f_c}, f_c_dn={self.f_c_dn}, "
                f"sample_rate={self.sample_rate}"
            )
        if self.r < 1:
            raise ValueError(f"filter order must be >= 1, got {self.r}")

    @property
    def nyquist(self) -> float:
        return self.sample_rate / 2.0


@dataclass
class Series:
    """A real multichannel signal, values shaped [channels, steps]."""

    values: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected [channels, steps], got shape {self.values.shape}")
        if self.values.shape[1] < 2:
            raise ValueError("series needs at least 2 steps")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("series contains non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def steps(self) -> int:
        return self.values.shape[1]


def _check_freq(f, spec: FilterSpec):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0) or np.any(f > spec.nyquist):
        raise ValueError(f"frequency outside [0, {spec.nyquist}] Hz")
    return f


def lowpass_response(f, spec: FilterSpec):
    """Low-pass gain at frequency ``f`` (Hz): 1/sqrt(1 + (f/f_c)^(2r))."""
    f = _check_freq(f, spec)
    return _lowpass_gain(f, spec.f_c, spec.r)


def highpass_response(f, spec: FilterSpec):
    """Band-pass gain between the two cutoffs: (1 - H_l(f; f_c)) * H_l(f; f_c_dn)."""
    f = _check_freq(f, spec)
    comp = _lowpass_complement(f, spec.f_c, spec.r)
    dn = _lowpass_gain(f, spec.f_c_dn, spec.r)
    return comp * dn


def _lowpass_gain(f, cutoff: float, r: int):
    ratio = np.asarray(f, dtype=np.float64) / cutoff
    return 1.0 / np.sqrt(1.0 + ratio ** (2 * r))


def _lowpass_complement(f, cutoff: float, r: int):
    """1 - H_l(f) evaluated without cancellation near f = 0:
    with x = (f/f_c)^(2r), 1 - 1/sqrt(1+x) = x / (sqrt(1+x)(1+sqrt(1+x)))."""
    x = (np.asarray(f, dtype=np.float64) / cutoff) ** (2 * r)
    root = np.sqrt(1.0 + x)
    return x / (root * (1.0 + root))


def _response_tensor(freqs: torch.Tensor, spec: FilterSpec, kind: str) -> torch.Tensor:
    ratio_c = freqs / spec.f_c
    low = 1.0 / torch.sqrt(1.0 + ratio_c ** (2 * spec.r))
    if kind == "low":
        return low
    ratio_dn = freqs / spec.f_c_dn
    dn = 1.0 / torch.sqrt(1.0 + ratio_dn ** (2 * spec.r))
    if kind == "high":
        x = ratio_c ** (2 * spec.r)
        root = torch.sqrt(1.0 + x)
        return x / (root * (1.0 + root)) * dn
    if kind == "low_dn":
        return dn
    raise ValueError(f"unknown filter kind {kind!r}")


def filter_tensor(x: torch.Tensor, spec: FilterSpec, kind: str) -> torch.Tensor:
    """Filter along the last dim of a torch tensor; autograd-safe.

    Pads with a full-length mirror of the signal on each side, applies
    the response on the real-FFT bins of the padded signal, and crops
    the center back out.
    """
    steps = x.shape[-1]
    if steps < 4:
        raise ValueError(f"need at least 4 steps to filter, got {steps}")
    mirror = torch.flip(x, dims=(-1,))
    padded = torch.cat([mirror, x, mirror], dim=-1)
    padded_len = 3 * steps
    spectrum = torch.fft.rfft(padded, dim=-1)
    freqs = torch.fft.rfftfreq(padded_len, d=1.0 / spec.sample_rate).to(x.dtype)
    gain = _response_tensor(freqs, spec, kind)
    out = torch.fft.irfft(spectrum * gain, n=padded_len, dim=-1)
    return out[..., steps : 2 * steps]


def _filter_series(s: Series, spec: FilterSpec, kind: str) -> Series:
    if not np.all(np.isfinite(s.values)):
        raise ValueError("non-finite input")
    x = torch.from_numpy(np.ascontiguousarray(s.values))
    out = filter_tensor(x, spec, kind)
    return Series(out.numpy(), s.sample_rate)


def fpf_low(s: Series, spec: FilterSpec) -> Series:
    """Zero-phase low-pass filter with cutoff ``spec.f_c``."""
    return _filter_series(s, spec, "low")


def fpf_high(s: Series, spec: FilterSpec) -> Series:
    """Zero-phase band-pass filter between ``spec.f_c`` and ``spec.f_c_dn``."""
    return _filter_series(s, spec, "high")


def fpf_denoise(s: Series, spec: FilterSpec) -> Series:
    """Zero-phase low-pass at the denoising cutoff ``spec.f_c_dn``."""
    return _filter_series(s, spec, "low_dn")


def decompose(w: Series, spec: FilterSpec) -> tuple[Series, Series]:
    """Split a signal into its trend (below f_c) and the exact remainder."""
    trend = fpf_low(w, spec)
    residual = Series(w.values - trend.values, w.sample_rate)
    return trend, residual


def energy_spectrum(windows: list[Series]) -> tuple[np.ndarray, np.ndarray]:
    """Mean squared FFT magnitude per channel over normalized windows.

    Each channel of each window is normalized to zero mean and unit
    variance first; zero-variance channels contribute all-zero rows.
    Returns (bin frequencies in Hz, spectrum [channels, bins]).
    """
    if not windows:
        raise ValueError("need at least one window")
    shape = windows[0].values.shape
    rate = windows[0].sample_rate
    for w in windows:
        if w.values.shape != shape or w.sample_rate != rate:
            raise ValueError("all windows must share shape and sample rate")
    steps = shape[1]
    freqs = np.fft.rfftfreq(steps, d=1.0 / rate)
    total = np.zeros((shape[0], freqs.size))
    for w in windows:
        v = w.values
        mean = v.mean(axis=1, keepdims=True)
        std = v.std(axis=1, keepdims=True)
        active = std[:, 0] > 0
        norm = np.zeros_like(v)
        norm[active] = (v[active] - mean[active]) / std[active]
        total += np.abs(np.fft.rfft(norm, axis=1)) ** 2
    return freqs, total / len(windows)
