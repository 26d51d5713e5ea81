"""Delayed-estimation episode reconstruction and band-specific metrics.

A trained model reconstructs each test episode using one prediction
point per input sample under a fixed time delay; the reconstruction and
the ground truth are then decomposed at the episode level and compared
with a windowed-RMS error on the residual band, a pointwise RMSE on the
trend band, and CRPS over the full band.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .data import Episode
from .spectral import FilterSpec, Series, decompose

FORCE = slice(0, 3)
TORQUE = slice(3, 6)


@dataclass(frozen=True)
class DelaySpec:
    t_delay_ms: float
    mode: str = "delay_compensated"  # or "zoh_point"

    def __post_init__(self):
        if self.t_delay_ms < 0:
            raise ValueError("delay must be nonnegative")
        if self.mode not in ("zoh_point", "delay_compensated"):
            raise ValueError(f"unknown delay mode {self.mode!r}")

    def steps(self, sample_rate: float) -> int:
        k = self.t_delay_ms * sample_rate / 1000.0
        if abs(k - round(k)) > 1e-9:
            raise ValueError(
                f"delay {self.t_delay_ms} ms is not a multiple of the sample period"
            )
        return int(round(k))


@dataclass
class MetricsReport:
    model_id: str
    episode: str
    delay_ms: float
    wrmse: np.ndarray  # [6]
    prmse: np.ndarray  # [6]
    crps: np.ndarray  # [6]
    normalized: bool = False
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("wrmse", "prmse", "crps"):
            vals = getattr(self, name)
            if np.any(~np.isfinite(vals)) or np.any(vals < 0):
                raise ValueError(f"{name} must be finite and nonnegative")
        self.aggregates = {
            "wrmse_force": float(self.wrmse[FORCE].mean()),
            "wrmse_torque": float(self.wrmse[TORQUE].mean()),
            "prmse_force": float(self.prmse[FORCE].mean()),
            "prmse_torque": float(self.prmse[TORQUE].mean()),
            "crps_force": float(self.crps[FORCE].mean()),
            "crps_torque": float(self.crps[TORQUE].mean()),
        }


# --- metric primitives ---------------------------------------------------

def window_rms(x: np.ndarray, w: int) -> np.ndarray:
    """Sliding-window RMS along the last axis; output length S-w+1."""
    if w > x.shape[-1]:
        raise ValueError(f"window {w} larger than series length {x.shape[-1]}")
    sq = np.cumsum(x**2, axis=-1, dtype=np.float64)
    sq = np.concatenate([np.zeros((*x.shape[:-1], 1)), sq], axis=-1)
    return np.sqrt((sq[..., w:] - sq[..., :-w]) / w)


def wrmse(pred_res: np.ndarray, true_res: np.ndarray, w: int) -> np.ndarray:
    """RMSE between sliding-window RMS tracks, per channel."""
    if pred_res.shape != true_res.shape:
        raise ValueError("shape mismatch")
    rp = window_rms(pred_res, w)
    rt = window_rms(true_res, w)
    return np.sqrt(((rp - rt) ** 2).mean(axis=-1))


def wrmse_expected(
    mu_res: np.ndarray, sigma: np.ndarray, true_res: np.ndarray, w: int
) -> np.ndarray:
    """wRMSE where the predicted window RMS uses E[x^2] = mu^2 + sigma^2."""
    if np.any(sigma < 0):
        raise ValueError("negative sigma")
    if mu_res.shape != true_res.shape or sigma.shape != mu_res.shape:
        raise ValueError("shape mismatch")
    rp = window_rms(np.sqrt(mu_res**2 + sigma**2), w)
    rt = window_rms(true_res, w)
    return np.sqrt(((rp - rt) ** 2).mean(axis=-1))


def prmse(pred_trend: np.ndarray, true_trend: np.ndarray) -> np.ndarray:
    """Pointwise RMSE per channel."""
    if pred_trend.shape != true_trend.shape:
        raise ValueError("shape mismatch")
    return np.sqrt(((pred_trend - true_trend) ** 2).mean(axis=-1))


def _norm_cdf(z):
    return 0.5 * (1.0 + erf(z / np.sqrt(2.0)))


def _norm_pdf(z):
    return np.exp(-0.5 * z**2) / np.sqrt(2.0 * np.pi)


def crps_gaussian(mu, sigma, obs) -> np.ndarray:
    """Closed-form CRPS of a Gaussian forecast; elementwise."""
    mu, sigma, obs = np.broadcast_arrays(
        np.asarray(mu, float), np.asarray(sigma, float), np.asarray(obs, float)
    )
    if np.any(sigma < 0):
        raise ValueError("negative sigma")
    out = np.abs(obs - mu)
    active = sigma > 0
    z = np.zeros_like(out)
    z[active] = (obs[active] - mu[active]) / sigma[active]
    val = sigma * (z * (2.0 * _norm_cdf(z) - 1.0) + 2.0 * _norm_pdf(z) - 1.0 / np.sqrt(np.pi))
    out = np.where(active, val, out)
    return out


def crps_deterministic(pred, obs) -> np.ndarray:
    """CRPS of a point forecast: the absolute error."""
    return np.abs(np.asarray(obs, float) - np.asarray(pred, float))


def crps_samples(samples: np.ndarray, obs: float) -> float:
    """Empirical-CDF CRPS from a forecast sample set (1-D)."""
    xs = np.sort(np.asarray(samples, float))
    n = xs.size
    if n == 0:
        raise ValueError("empty sample set")
    term1 = np.abs(xs - obs).mean()
    # mean pairwise distance of a sorted sample in O(n log n)
    i = np.arange(n)
    term2 = 2.0 * np.sum((2 * i - n + 1) * xs) / (n * n)
    return float(term1 - 0.5 * term2)


# --- reconstruction ------------------------------------------------------

def _window_inputs(e: Episode) -> np.ndarray:
    """Full-episode input rows [5n, steps] in window layout."""
    if "qd" not in e.meta or "qdd" not in e.meta:
        raise ValueError("episode lacks qd/qdd; run preprocess_episode first")
    dq = e.q - e.q0[:, None]
    q0 = np.tile(e.q0[:, None], (1, e.steps))
    return np.concatenate([dq, e.meta["qd"], e.meta["qdd"], e.u, q0])


def reconstruct_episode(
    predict,
    episode: Episode,
    delay: DelaySpec,
    L: int,
    T: int | None = None,
    batch: int = 256,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Rebuild the episode wrench from one prediction point per sample.

    ``predict`` maps a batch of inputs to predictions:
      - delay_compensated: X [B, 5n, L] -> (mean [B, 6, T], sigma or None);
        the horizon-k point of the forecast issued at time t is placed
        at absolute time t+k (forecasts start at t+1, so k >= 1).
      - zoh_point: X_t [B, 4n] -> [B, 6]; estimates are shifted backward
        by k steps and compared against the unshifted truth.

    Returns (reconstruction [6, steps], sigma track or None, validity
    mask [steps]); steps without a full history or a placed prediction
    are invalid.
    """
    k = delay.steps(episode.sample_rate)
    steps = episode.steps
    recon = np.zeros((6, steps))
    sigma_track: np.ndarray | None = None
    valid = np.zeros(steps, dtype=bool)

    if delay.mode == "zoh_point":
        rows = _window_inputs(episode)
        n = episode.n
        q = episode.q
        x_t = np.concatenate([q, rows[n : 4 * n]])  # absolute positions
        est = np.concatenate(
            [predict(x_t[:, i : i + batch].T) for i in range(0, steps, batch)]
        ).T  # [6, steps]
        if k > 0:
            recon[:, k:] = est[:, :-k]
        else:
            recon = est.copy()
        valid[L + k :] = True
        return recon, None, valid

    if T is None:
        raise ValueError("forecaster mode needs the horizon length T")
    if k < 1:
        raise ValueError("delay_compensated mode needs delay >= 1 step; forecasts start at t+1")
    if k > T:
        raise ValueError(f"delay of {k} steps exceeds the horizon T={T}")

    rows = _window_inputs(episode)
    origins = np.arange(L - 1, steps - k)  # prediction times t
    has_sigma = False
    for i in range(0, origins.size, batch):
        batch_origins = origins[i : i + batch]
        X = np.stack([rows[:, t - L + 1 : t + 1] for t in batch_origins])
        mean, sigma = predict(X)
        recon[:, batch_origins + k] = mean[:, :, k - 1].T
        if sigma is not None:
            if sigma_track is None:
                sigma_track = np.zeros((6, steps))
                has_sigma = True
            sigma_track[:, batch_origins + k] = sigma[:, :, k - 1].T
    valid[L + k :] = True
    return recon, sigma_track if has_sigma else None, valid


def evaluate_episode(
    predict,
    episode: Episode,
    delay: DelaySpec,
    spec: FilterSpec,
    L: int,
    T: int | None = None,
    w: int = 10,
    model_id: str = "model",
    norm_scale: np.ndarray | None = None,
) -> list[MetricsReport]:
    """Reconstruct one episode at one delay and score it.

    Returns the physical-scale report, plus a normalized-scale report
    when ``norm_scale`` (per-channel wrench std) is given.
    """
    recon, sigma, valid = reconstruct_episode(predict, episode, delay, L, T)
    sel = np.flatnonzero(valid)
    recon_v = recon[:, sel]
    truth_v = episode.W[:, sel]
    sigma_v = sigma[:, sel] if sigma is not None else None

    rt, rr = decompose(Series(recon_v, episode.sample_rate), spec)
    tt, tr = decompose(Series(truth_v, episode.sample_rate), spec)

    if sigma_v is not None:
        wr = wrmse_expected(rr.values, sigma_v, tr.values, w)
        crps_vals = crps_gaussian(recon_v, sigma_v, truth_v).mean(axis=-1)
    else:
        wr = wrmse(rr.values, tr.values, w)
        crps_vals = crps_deterministic(recon_v, truth_v).mean(axis=-1)
    pr = prmse(rt.values, tt.values)

    label = episode.session + f"#{episode.meta.get('seed', '')}"
    reports = [
        MetricsReport(model_id, label, delay.t_delay_ms, wr, pr, crps_vals)
    ]
    if norm_scale is not None:
        s = np.asarray(norm_scale, float)
        reports.append(
            MetricsReport(
                model_id, label, delay.t_delay_ms, wr / s, pr / s, crps_vals / s,
                normalized=True,
            )
        )
    return reports


def evaluate(
    predict,
    episodes: list[Episode],
    delays: list[DelaySpec],
    spec: FilterSpec,
    L: int,
    T: int | None = None,
    w: int = 10,
    model_id: str = "model",
    norm_scale: np.ndarray | None = None,
) -> list[MetricsReport]:
    """Score every (episode, delay) pair; episode order is preserved."""
    reports = []
    for e in episodes:
        for d in delays:
            reports.extend(
                evaluate_episode(
                    predict, e, d, spec, L, T, w, model_id, norm_scale
                )
            )
    return reports


CHANNELS = ("fx", "fy", "fz", "mx", "my", "mz")


def write_report(reports: list[MetricsReport], path: str) -> None:
    """Serialize reports as a comma-separated table, one row per channel."""
    lines = ["model,episode,delay_ms,channel,wrmse,prmse,crps,normalized"]
    for rep in reports:
        for i, ch in enumerate(CHANNELS):
            lines.append(
                f"{rep.model_id},{rep.episode},{rep.delay_ms:g},{ch},"
                f"{rep.wrmse[i]:.9g},{rep.prmse[i]:.9g},{rep.crps[i]:.9g},"
                f"{int(rep.normalized)}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def summarize(reports: list[MetricsReport]) -> str:
    """Human-readable force/torque aggregate summary."""
    lines = []
    for rep in reports:
        tag = " (normalized)" if rep.normalized else ""
        a = rep.aggregates
        lines.append(
            f"{rep.model_id} {rep.episode} delay={rep.delay_ms:g}ms{tag}: "
            f"wRMSE {a['wrmse_force']:.3f} N / {a['wrmse_torque']:.3f} Nm, "
            f"pRMSE {a['prmse_force']:.3f} N / {a['prmse_torque']:.3f} Nm, "
            f"CRPS {a['crps_force']:.3f} N / {a['crps_torque']:.3f} Nm"
        )
    return "\n".join(lines)


def plot_reconstruction(
    episode: Episode,
    recon: np.ndarray,
    sigma: np.ndarray | None,
    valid: np.ndarray,
    path: str,
    channels: tuple[int, ...] = (0, 4),
) -> None:
    """Overlay truth and reconstruction, with a mu +/- 3 sigma band when
    a sigma track exists."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = episode.timestamps
    sel = np.flatnonzero(valid)
    fig, axes = plt.subplots(len(channels), 1, figsize=(10, 2.6 * len(channels)), sharex=True)
    if len(channels) == 1:
        axes = [axes]
    for ax, ch in zip(axes, channels):
        ax.plot(t[sel], episode.W[ch, sel], lw=0.6, label="truth", color="k")
        ax.plot(t[sel], recon[ch, sel], lw=0.6, label="reconstruction", color="tab:blue")
        if sigma is not None:
            ax.fill_between(
                t[sel],
                recon[ch, sel] - 3 * sigma[ch, sel],
                recon[ch, sel] + 3 * sigma[ch, sel],
                alpha=0.25,
                color="tab:blue",
                label="+/- 3 sigma",
            )
        ax.set_ylabel(CHANNELS[ch])
        ax.legend(loc="upper right", fontsize=8)
    axes[-1].set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
