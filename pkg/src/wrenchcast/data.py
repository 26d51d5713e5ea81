"""Episode synthesis, preprocessing, windowing, and normalization.

An Episode is a uniformly sampled multichannel record of joint positions,
an actuation signal, and a 6-channel wrench. The synthetic generator
produces vibration-rich wrenches whose high-frequency residual amplitude
is modulated by a known envelope, so downstream models can be checked
against the generating parameters.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .spectral import FilterSpec, Series, decompose, fpf_denoise, fpf_high


@dataclass
class Episode:
    timestamps: np.ndarray  # [steps], seconds, uniform
    q: np.ndarray  # [n, steps], rad
    u: np.ndarray  # [n, steps], actuation units
    W: np.ndarray  # [6, steps], N / Nm
    q0: np.ndarray  # [n], rad
    sample_rate: float
    session: str = "default"
    static_end_s: float | None = None
    w_timestamps: np.ndarray | None = None  # set when the wrench clock differs
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        steps = self.timestamps.shape[0]
        for name in ("q", "u", "W"):
            arr = getattr(self, name)
            if arr.shape[1] != steps:
                raise ValueError(f"{name} has {arr.shape[1]} steps, expected {steps}")
        dt = np.diff(self.timestamps)
        if steps > 1 and (np.any(dt <= 0) or np.ptp(dt) > 1e-9):
            raise ValueError("timestamps must be strictly increasing and uniform")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def steps(self) -> int:
        return self.timestamps.shape[0]


@dataclass
class WindowSample:
    """One (history, future) pair.

    x rows are ordered [dq; qd; qdd; u; q0 broadcast], shape [5n, L].
    The future wrench is stored with its trend/residual decomposition;
    w_trend + w_res reconstructs w_future exactly.
    """

    x: np.ndarray  # [5n, L]
    w_future: np.ndarray  # [6, T]
    w_trend: np.ndarray  # [6, T]
    w_res: np.ndarray  # [6, T]
    t_index: int  # prediction-time index into the source episode


@dataclass
class SynthConfig:
    n: int = 6
    length_s: float = 180.0
    sample_rate: float = 100.0
    static_s: float = 5.0
    motion_freq_lo: float = 0.02
    motion_freq_hi: float = 0.4
    f_c: float = 1.0
    f_c_dn: float = 15.0
    force_peak: float = 100.0
    torque_peak: float = 30.0
    trend_frac: float = 0.3
    sigma_base_frac: float = 0.2
    sigma_gain_frac: float = 0.8
    u_noise: float = 0.01
    trend_map_seed: int = 0
    sigma_map_seed: int = 0
    session: str = "synthetic"

    def __post_init__(self):
        nyq = self.sample_rate / 2.0
        if not (0.0 < self.motion_freq_hi <= self.f_c <= self.f_c_dn < nyq):
            raise ValueError("bands must satisfy 0 < motion band <= f_c <= f_c_dn < Nyquist")

    @property
    def filter_spec(self) -> FilterSpec:
        return FilterSpec(self.f_c, self.f_c_dn, self.sample_rate)

    @property
    def peak(self) -> np.ndarray:
        return np.array([self.force_peak] * 3 + [self.torque_peak] * 3)

    @classmethod
    def pretraining(cls, n: int = 7, length_s: float = 120.0) -> "SynthConfig":
        # low-frequency-dominant wrench profile for the surrogate corpus
        return cls(
            n=n,
            length_s=length_s,
            trend_frac=1.0,
            sigma_base_frac=0.02,
            sigma_gain_frac=0.05,
            session="surrogate",
        )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _row_normalize(x: np.ndarray) -> np.ndarray:
    std = x.std(axis=1, keepdims=True)
    return x / np.maximum(std, 1e-12)


def synth_episode(cfg: SynthConfig, seed: int) -> Episode:
    """Generate one episode deterministically from (cfg, seed).

    Joint motion is a sum of low-frequency sinusoids starting after a
    static head segment. The wrench trend is a smooth nonlinear map of
    the motion, and the residual is band-limited noise whose amplitude
    envelope sigma(t) is a second nonlinear map of the motion; both maps
    and sigma(t) are kept in ``meta`` as ground truth.

    The nonlinear maps are seeded by the config's map seeds, not the
    episode seed, so every episode of a dataset shares the same
    motion-to-wrench relationship and held-out episodes are predictable
    from training ones. The episode seed drives the trajectory and the
    noise.
    """
    rng = np.random.default_rng(seed)
    trend_rng = np.random.default_rng([cfg.trend_map_seed, cfg.n])
    sigma_rng = np.random.default_rng([cfg.sigma_map_seed, cfg.n])
    fs = cfg.sample_rate
    steps = int(round(cfg.length_s * fs))
    static_steps = int(round(cfg.static_s * fs))
    n = cfg.n
    t = np.arange(steps) / fs

    q0 = rng.uniform(-1.0, 1.0, size=n)

    # per-joint sinusoid banks; motion-local time starts after the static head
    n_sin = 5
    freqs = rng.uniform(cfg.motion_freq_lo, cfg.motion_freq_hi, size=(n, n_sin))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n, n_sin))
    amps = rng.uniform(0.2, 1.0, size=(n, n_sin))
    amps *= rng.uniform(0.5, 1.0, size=(n, 1)) / amps.sum(axis=1, keepdims=True)

    tm = np.maximum(t - cfg.static_s, 0.0)
    arg = 2.0 * np.pi * freqs[:, :, None] * tm[None, None, :] + phases[:, :, None]
    omega = 2.0 * np.pi * freqs[:, :, None]
    dq = (amps[:, :, None] * (np.sin(arg) - np.sin(phases)[:, :, None])).sum(axis=1)
    qd = (amps[:, :, None] * omega * np.cos(arg)).sum(axis=1)
    qdd = (amps[:, :, None] * omega**2 * -np.sin(arg)).sum(axis=1)
    moving = tm > 0
    qd[:, ~moving] = 0.0
    qdd[:, ~moving] = 0.0

    # fixed nominal scales (typical motion stds) rather than per-episode
    # statistics, so the wrench maps are identical across episodes
    dq_s, qd_s, qdd_s = dq / 0.33, qd / 0.38, qdd / 0.73
    feat3 = np.concatenate([dq_s, qd_s, qdd_s], axis=0)
    feat2 = np.concatenate([dq_s, qd_s], axis=0)

    peak = cfg.peak[:, None]
    A = trend_rng.normal(0.0, 1.0, size=(6, 3 * n)) / np.sqrt(3 * n)
    trend_raw = np.tanh(2.0 * (A @ feat3)) * cfg.trend_frac * peak
    spec = cfg.filter_spec
    w_trend = Series(trend_raw, fs)
    from .spectral import fpf_low

    w_trend = fpf_low(w_trend, spec).values

    B = sigma_rng.normal(0.0, 1.0, size=(6, 2 * n)) / np.sqrt(2 * n)
    sigma = (cfg.sigma_base_frac + cfg.sigma_gain_frac * _sigmoid(2.0 * (B @ feat2))) * peak

    noise = rng.standard_normal((6, steps))
    band = fpf_high(Series(noise, fs), spec).values
    band = _row_normalize(band)
    w_res = sigma * band

    # static head is exactly constant; sigma outside it is the real envelope
    w_trend[:, :static_steps] = 0.0
    w_res[:, :static_steps] = 0.0
    sigma[:, :static_steps] = 0.0
    W = w_trend + w_res

    C = trend_rng.normal(0.0, 1.0, size=(n, 3 * n)) / np.sqrt(3 * n)
    D = trend_rng.normal(0.0, 0.3, size=(n, 6)) / np.sqrt(6)
    u = C @ feat3 + D @ (W / peak) + cfg.u_noise * rng.standard_normal((n, steps))

    meta = {
        "seed": seed,
        "qd": qd,
        "qdd": qdd,
        "sigma": sigma,
        "w_trend": w_trend,
        "w_res": w_res,
        "maps": {"A": A, "B": B, "C": C, "D": D},
        "sigma_params": {
            "base_frac": cfg.sigma_base_frac,
            "gain_frac": cfg.sigma_gain_frac,
            "sigma_map_seed": cfg.sigma_map_seed,
            "trend_map_seed": cfg.trend_map_seed,
        },
    }
    return Episode(
        timestamps=t,
        q=q0[:, None] + dq,
        u=u,
        W=W,
        q0=q0,
        sample_rate=fs,
        session=cfg.session,
        static_end_s=cfg.static_s,
        meta=meta,
    )


def savitzky_golay_causal(
    s: Series, window: int, order: int, deriv: int = 0
) -> Series:
    """Causal polynomial-fit derivative estimate along each channel.

    Output at step t is the derivative at the trailing edge of a
    least-squares polynomial fitted on samples [t-window+1, t]. The
    first window-1 steps are fitted on the truncated available prefix
    with the order reduced to fit; prefixes too short to support
    ``deriv`` produce 0. Derivatives are scaled to per-second
    units using the series sample rate.
    """
    if window < order + 1:
        raise ValueError(f"window {window} must be >= order+1 ({order + 1})")
    if deriv > order:
        raise ValueError(f"deriv {deriv} exceeds order {order}")
    if window > s.steps:
        raise ValueError(f"window {window} larger than series length {s.steps}")

    def edge_coeffs(m: int, o: int) -> np.ndarray:
        tau = np.arange(-(m - 1), 1, dtype=np.float64)
        V = np.vander(tau, o + 1, increasing=True)
        pinv = np.linalg.pinv(V)
        return pinv[deriv] * math.factorial(deriv)

    scale = s.sample_rate**deriv
    out = np.zeros_like(s.values)
    c = edge_coeffs(window, order)
    windows = np.lib.stride_tricks.sliding_window_view(s.values, window, axis=1)
    out[:, window - 1 :] = windows @ c * scale
    for t in range(window - 1):
        m = t + 1
        o = min(order, m - 1)
        if o < deriv:
            out[:, t] = 0.0
            continue
        c_t = edge_coeffs(m, o)
        out[:, t] = s.values[:, max(t + 1 - m, 0) : t + 1] @ c_t * scale
    return Series(out, s.sample_rate)


def zoh_align(values: np.ndarray, src_t: np.ndarray, dst_t: np.ndarray) -> np.ndarray:
    """Resample columns onto dst_t holding the most recent source sample."""
    idx = np.searchsorted(src_t, dst_t, side="right") - 1
    idx = np.clip(idx, 0, values.shape[1] - 1)
    return values[:, idx]


def preprocess_episode(
    raw: Episode,
    spec: FilterSpec,
    sg: tuple[int, int] = (11, 3),
) -> Episode:
    """Denoise, differentiate, align, and offset-correct one episode.

    q and u are low-passed at the denoising cutoff; joint velocity and
    acceleration come from a causal polynomial fit on the denoised q.
    The wrench is zero-order-hold aligned onto the joint clock if its
    timestamps differ, denoised at the episode level, and offset-removed
    per channel using the static-segment mean.
    """
    if raw.static_end_s is None:
        raise ValueError(
            "episode has no static-segment annotation; set static_end_s to the "
            "end time (s) of a contact-free static phase before preprocessing"
        )
    fs = raw.sample_rate
    W = raw.W
    if raw.w_timestamps is not None:
        W = zoh_align(W, raw.w_timestamps, raw.timestamps)

    q = fpf_denoise(Series(raw.q, fs), spec).values
    u = fpf_denoise(Series(raw.u, fs), spec).values
    window, order = sg
    qd = savitzky_golay_causal(Series(q, fs), window, order, deriv=1).values
    qdd = savitzky_golay_causal(Series(q, fs), window, order, deriv=2).values

    W = fpf_denoise(Series(W, fs), spec).values
    static_steps = int(round(raw.static_end_s * fs))
    if static_steps < 1:
        raise ValueError("static segment is empty")
    W = W - W[:, :static_steps].mean(axis=1, keepdims=True)

    meta = dict(raw.meta)
    meta["qd"] = qd
    meta["qdd"] = qdd
    return replace(
        raw, q=q, u=u, W=W, w_timestamps=None, meta=meta
    )


def make_windows(
    e: Episode,
    L: int,
    T: int,
    stride: int,
    spec: FilterSpec,
) -> list[WindowSample]:
    """Slice an episode into (history, future) samples.

    Requires qd/qdd in the episode meta (from preprocessing or the
    synthetic generator). An episode shorter than L+T yields an empty
    list with a warning.
    """
    if "qd" not in e.meta or "qdd" not in e.meta:
        raise ValueError("episode lacks qd/qdd; run preprocess_episode first")
    if e.steps < L + T:
        warnings.warn(
            f"episode of {e.steps} steps too short for L+T={L + T}; no windows"
        )
        return []
    dq = e.q - e.q0[:, None]
    qd, qdd = e.meta["qd"], e.meta["qdd"]
    q0_tile = np.tile(e.q0[:, None], (1, L))
    samples = []
    count = (e.steps - L - T) // stride + 1
    for i in range(count):
        s0 = i * stride
        hist = slice(s0, s0 + L)
        fut = slice(s0 + L, s0 + L + T)
        x = np.concatenate([dq[:, hist], qd[:, hist], qdd[:, hist], e.u[:, hist], q0_tile])
        w_future = e.W[:, fut]
        trend, res = decompose(Series(w_future, e.sample_rate), spec)
        samples.append(
            WindowSample(
                x=x,
                w_future=w_future,
                w_trend=trend.values,
                w_res=res.values,
                t_index=s0 + L - 1,
            )
        )
    return samples


@dataclass
class NormStats:
    """Per-row input statistics and per-channel wrench statistics."""

    x_mean: np.ndarray  # [5n]
    x_std: np.ndarray  # [5n]
    w_mean: np.ndarray  # [6]
    w_std: np.ndarray  # [6]

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "w_mean": self.w_mean.tolist(),
            "w_std": self.w_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("x_mean", "x_std", "w_mean", "w_std")))


def fit_norm(samples: list[WindowSample], masked_rows: np.ndarray | None = None) -> NormStats:
    """Fit per-row mean/std over a training set of window samples.

    Masked rows keep (mean, std) = (0, 1). Zero-variance active rows are
    clamped to std 1e-8 with a warning.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to fit normalization")
    X = np.stack([s.x for s in samples])  # [N, 5n, L]
    W = np.stack([s.w_future for s in samples])
    x_mean = X.mean(axis=(0, 2))
    x_std = X.std(axis=(0, 2))
    w_mean = W.mean(axis=(0, 2))
    w_std = W.std(axis=(0, 2))
    for std in (x_std, w_std):
        dead = std <= 0
        if np.any(dead):
            warnings.warn(f"{int(dead.sum())} zero-variance rows; std clamped to 1e-8")
            std[dead] = 1e-8
    if masked_rows is not None:
        x_mean[masked_rows] = 0.0
        x_std[masked_rows] = 1.0
    return NormStats(x_mean, x_std, w_mean, w_std)


def apply_norm(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Normalize input rows; x is [5n, L] or [N, 5n, L]."""
    return (x - stats.x_mean[..., :, None]) / stats.x_std[..., :, None]


def invert_norm(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return x * stats.x_std[..., :, None] + stats.x_mean[..., :, None]


def normalize_wrench_decomp(
    w_trend: np.ndarray, w_res: np.ndarray, stats: NormStats
) -> tuple[np.ndarray, np.ndarray]:
    """Map a trend/residual pair onto the normalized wrench scale.

    The affine shift goes entirely to the trend so that the normalized
    pair still sums to the normalized full wrench.
    """
    std = stats.w_std[..., :, None]
    return (w_trend - stats.w_mean[..., :, None]) / std, w_res / std


def split_episodes(
    episodes: list[Episode],
    test_fraction: float = 1.0 / 3.0,
    seed: int = 0,
) -> tuple[list[Episode], list[Episode]]:
    """Deterministic episode-level split, stratified per session."""
    if len(episodes) < 2:
        raise ValueError("need at least 2 episodes to split")
    by_session: dict[str, list[int]] = {}
    for i, e in enumerate(episodes):
        by_session.setdefault(e.session, []).append(i)
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for session in sorted(by_session):
        idx = np.array(by_session[session])
        if idx.size < 1:
            raise ValueError(f"session {session!r} has no episodes")
        k = int(round(test_fraction * idx.size))
        k = min(max(k, 1 if idx.size > 1 else 0), idx.size - 1)
        perm = rng.permutation(idx.size)
        test_idx.update(idx[perm[:k]].tolist())
    train = [e for i, e in enumerate(episodes) if i not in test_idx]
    test = [e for i, e in enumerate(episodes) if i in test_idx]
    if not train or not test:
        raise ValueError("split produced an empty side; add episodes")
    return train, test


# --- episode file format -------------------------------------------------

def save_episode(e: Episode, path: str) -> None:
    """Write the CSV table and its key-value sidecar (same basename + .meta)."""
    n = e.n
    header = (
        "t,"
        + ",".join(f"q{i + 1}" for i in range(n))
        + ","
        + ",".join(f"u{i + 1}" for i in range(n))
        + ",fx,fy,fz,mx,my,mz"
    )
    table = np.vstack([e.timestamps[None, :], e.q, e.u, e.W]).T
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.10g")
    meta_path = _sidecar_path(path)
    lines = [
        f"sample_rate = {e.sample_rate}",
        f"session = {e.session}",
        f"n = {n}",
        f"static_end_s = {e.static_end_s if e.static_end_s is not None else ''}",
        f"seed = {e.meta.get('seed', '')}",
    ]
    q0_str = ",".join(f"{v:.12g}" for v in e.q0)
    lines.append(f"q0 = {q0_str}")
    if "sigma_params" in e.meta:
        lines.append(f"sigma_params = {json.dumps(e.meta['sigma_params'])}")
    with open(meta_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _sidecar_path(path: str) -> str:
    base = path[:-4] if path.endswith(".csv") else path
    return base + ".meta"


def load_episode(path: str) -> Episode:
    """Read an episode CSV plus sidecar written by save_episode (or any
    externally produced file of the same shape)."""
    meta: dict[str, str] = {}
    with open(_sidecar_path(path)) as fh:
        for line in fh:
            if "=" in line:
                key, val = line.split("=", 1)
                meta[key.strip()] = val.strip()
    n = int(meta["n"])
    table = np.loadtxt(path, delimiter=",", skiprows=1).T
    if table.shape[0] != 1 + 2 * n + 6:
        raise ValueError(f"expected {1 + 2 * n + 6} columns for n={n}, got {table.shape[0]}")
    q0 = (
        np.array([float(v) for v in meta["q0"].split(",")])
        if "q0" in meta
        else table[1 : 1 + n, 0]
    )
    static = float(meta["static_end_s"]) if meta.get("static_end_s") else None
    emeta: dict = {}
    if meta.get("seed"):
        emeta["seed"] = int(meta["seed"])
    if meta.get("sigma_params"):
        emeta["sigma_params"] = json.loads(meta["sigma_params"])
    return Episode(
        timestamps=table[0],
        q=table[1 : 1 + n],
        u=table[1 + n : 1 + 2 * n],
        W=table[1 + 2 * n :],
        q0=q0,
        sample_rate=float(meta["sample_rate"]),
        session=meta.get("session", "default"),
        static_end_s=static,
        meta=emeta,
    )
