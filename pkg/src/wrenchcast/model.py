"""Decomposition forecaster: spectrally decomposed wrench prediction.

The network maps a proprioceptive history [5n, L] to a trend forecast
and a step/channel-wise Gaussian residual distribution over the horizon
T. Inputs pass through per-sample instance normalization, a learned
mixture of spectral filters, modality-specific patch transformers, and
a channel-mixing projection; the two output heads are band-limited by
fixed zero-phase filters so the trend stays below f_c and the residual
mean inside (f_c, f_c_dn].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .spectral import FilterSpec, filter_tensor

MODALITIES = ("dq", "qd", "qdd", "u")

# effectively zero sigma; used when the residual head is ablated
LOGVAR_FLOOR = -80.0
LOGVAR_CLAMP = (-12.0, 8.0)
REVIN_EPS = 1e-5


@dataclass
class ModelConfig:
    n: int = 6
    L: int = 100
    T: int = 100
    D: int = 128
    P: int = 24
    M: int = 32
    f_c: float = 1.0
    f_c_dn: float = 15.0
    sample_rate: float = 100.0
    depth: int = 3
    heads: int = 8
    mask_u: bool = False
    no_fef: bool = False
    no_fef_weights: bool = False
    no_fef_moe: bool = False
    no_fpf: bool = False
    shared_encoder: bool = False
    no_trend_head: bool = False
    no_res_head: bool = False

    def __post_init__(self):
        if self.L < self.P:
            raise ValueError(f"history L={self.L} shorter than patch P={self.P}")
        if self.no_trend_head and self.no_res_head:
            raise ValueError("cannot ablate both heads")
        if self.no_fef_moe:
            self.M = 1

    @property
    def S(self) -> int:
        # stride equals patch length
        return self.P

    @property
    def N(self) -> int:
        return (self.L - self.P) // self.S + 2

    @property
    def spec(self) -> FilterSpec:
        return FilterSpec(self.f_c, self.f_c_dn, self.sample_rate)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForecastDistribution:
    """Filtered trend, filtered residual mean, and residual log-variance.

    All fields share shape [..., 6, T]."""

    trend: torch.Tensor
    mu_res: torch.Tensor
    logvar_res: torch.Tensor

    @property
    def predictive_mean(self) -> torch.Tensor:
        return self.trend + self.mu_res

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.logvar_res / 2.0)

    def sample(self, seed: int | None = None) -> torch.Tensor:
        res = sample_residual(self.mu_res, self.logvar_res, seed)
        return self.trend + res


def sample_residual(
    mu_res: torch.Tensor, logvar: torch.Tensor, seed: int | None = None
) -> torch.Tensor:
    """Draw mu + eps * exp(logvar/2) with eps independent per element."""
    gen = None
    if seed is not None:
        gen = torch.Generator(device=mu_res.device)
        gen.manual_seed(seed)
    eps = torch.randn(mu_res.shape, generator=gen, dtype=mu_res.dtype, device=mu_res.device)
    return mu_res + eps * torch.exp(logvar / 2.0)


def revin_norm(
    x: torch.Tensor, skip: torch.Tensor | None = None, eps: float = REVIN_EPS
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
    """Per-sample, per-channel normalization over the time axis.

    x is [..., C, L]. Channels flagged in ``skip`` keep (mean, std) =
    (0, 1). Variance is biased (population).
    """
    mean = x.mean(dim=-1, keepdim=True)
    std = torch.sqrt(x.var(dim=-1, unbiased=False, keepdim=True) + eps)
    if skip is not None:
        keep = ~skip
        mean = mean * keep[..., :, None]
        std = torch.where(skip[..., :, None], torch.ones_like(std), std)
    return (x - mean) / std, (mean, std)


def revin_invert(
    z: torch.Tensor, stats: tuple[torch.Tensor, torch.Tensor]
) -> torch.Tensor:
    """Invert revin_norm on a representation [..., C, N, D]."""
    mean, std = stats
    return z * std[..., None] + mean[..., None]


class FrequencyEnhancement(nn.Module):
    """Mixture of learned per-bin spectral filters with a linear gate.

    Each expert scales the real-FFT bins of every channel by a positive
    learned weight; expert outputs are combined in the time domain with
    softmax gate weights computed from the flattened input.
    """

    def __init__(self, channels: int, length: int, experts: int, weighted: bool = True):
        super().__init__()
        self.channels = channels
        self.length = length
        self.experts = experts
        self.weighted = weighted and experts > 1
        bins = length // 2 + 1
        # softplus(w) == 1 at init: identity filter
        init = math.log(math.e - 1.0)
        self.filter_weights = nn.Parameter(torch.full((experts, channels, bins), init))
        if self.weighted:
            self.gate = nn.Linear(channels * length, experts, bias=False)
            nn.init.zeros_(self.gate.weight)

    def forward(self, x: torch.Tensor, alpha: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-2] != self.channels or x.shape[-1] != self.length:
            raise ValueError(
                f"expected [..., {self.channels}, {self.length}], got {tuple(x.shape)}"
            )
        spectrum = torch.fft.rfft(x, dim=-1)
        gains = nn.functional.softplus(self.filter_weights).to(spectrum.real.dtype)
        # [..., M, C, bins]
        filtered = spectrum.unsqueeze(-3) * gains
        y = torch.fft.irfft(filtered, n=self.length, dim=-1)
        if alpha is None:
            alpha = self.gate_weights(x)
        return (y * alpha[..., :, None, None]).sum(dim=-3)

    def gate_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax expert weights [..., M] for an input [..., C, L]."""
        batch_shape = x.shape[:-2]
        if not self.weighted:
            alpha = torch.full(
                (*batch_shape, self.experts),
                1.0 / self.experts,
                dtype=x.dtype,
                device=x.device,
            )
            return alpha
        logits = self.gate(x.reshape(*batch_shape, -1))
        return torch.softmax(logits, dim=-1)


def sinusoidal_positions(n_pos: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n_pos, dtype=torch.float64)[:, None]
    i = torch.arange(dim, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, (2 * (i // 2)) / dim)
    enc = torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))
    return enc


def _patchify(x: torch.Tensor, P: int, S: int) -> torch.Tensor:
    """[..., L] -> [..., N, P] with the final value replicated to finish
    one extra patch."""
    pad = x[..., -1:].expand(*x.shape[:-1], S)
    return torch.cat([x, pad], dim=-1).unfold(-1, P, S)


class SequenceEncoder(nn.Module):
    """Patch embedding plus a small pre-norm transformer over patches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.P, cfg.D)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.D,
            nhead=cfg.heads,
            dim_feedforward=4 * cfg.D,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.depth, enable_nested_tensor=False)
        self.register_buffer(
            "positions", sinusoidal_positions(cfg.N, cfg.D).float(), persistent=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[B, n, L] -> [B, n, N, D]; channels are encoded independently."""
        B, n, _ = x.shape
        patches = _patchify(x, self.cfg.P, self.cfg.S)  # [B, n, N, P]
        tokens = self.embed(patches) + self.positions.to(x.dtype)
        tokens = tokens.reshape(B * n, self.cfg.N, self.cfg.D)
        out = self.encoder(tokens)
        return out.reshape(B, n, self.cfg.N, self.cfg.D)


class DecompForecaster(nn.Module):
    """Trend + Gaussian-residual wrench forecaster with frequency-aware
    input enhancement and band-limited outputs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.n
        if not cfg.no_fef:
            self.fef = FrequencyEnhancement(
                4 * n, cfg.L, cfg.M, weighted=not cfg.no_fef_weights
            )
        if cfg.shared_encoder:
            shared = SequenceEncoder(cfg)
            self.encoders = nn.ModuleDict({m: shared for m in MODALITIES})
        else:
            self.encoders = nn.ModuleDict({m: SequenceEncoder(cfg) for m in MODALITIES})
        self.q0_encoder = nn.Sequential(
            nn.Linear(n, cfg.D), nn.GELU(), nn.Linear(cfg.D, cfg.D)
        )
        self.channel_mix = nn.Linear(4 * n, 6)
        width = cfg.N * cfg.D
        if not cfg.no_trend_head:
            self.trend_head = nn.Linear(width, cfg.T)
        if not cfg.no_res_head:
            self.mu_head = nn.Linear(width, cfg.T)
            self.logvar_head = nn.Linear(width, cfg.T)

    def _skip_mask(self, device) -> torch.Tensor | None:
        if not self.cfg.mask_u:
            return None
        skip = torch.zeros(4 * self.cfg.n, dtype=torch.bool, device=device)
        skip[3 * self.cfg.n :] = True
        return skip

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """[B, 5n, L] -> final representation z [B, 6, N, D]."""
        cfg = self.cfg
        n = cfg.n
        if x.shape[-2] != 5 * n or x.shape[-1] != cfg.L:
            raise ValueError(f"expected [B, {5 * n}, {cfg.L}], got {tuple(x.shape)}")
        xd = x[:, : 4 * n, :]
        q0 = x[:, 4 * n :, 0]

        skip = self._skip_mask(x.device)
        xn, stats = revin_norm(xd, skip=skip)
        if cfg.mask_u:
            # zeroed before the gate so u cannot influence any path
            xn = torch.cat([xn[:, : 3 * n], torch.zeros_like(xn[:, 3 * n :])], dim=1)
        if not cfg.no_fef:
            xn = self.fef(xn)
            if cfg.mask_u:
                xn = torch.cat([xn[:, : 3 * n], torch.zeros_like(xn[:, 3 * n :])], dim=1)

        mean, std = stats
        reps = []
        for i, mod in enumerate(MODALITIES):
            block = slice(i * n, (i + 1) * n)
            z = self.encoders[mod](xn[:, block])
            if mod == "u" and cfg.mask_u:
                z = torch.zeros_like(z)
            else:
                z = revin_invert(z, (mean[:, block], std[:, block]))
            if mod == "dq":
                z = z + self.q0_encoder(q0)[:, None, None, :]
            reps.append(z)
        z_all = torch.cat(reps, dim=1)  # [B, 4n, N, D]
        mixed = self.channel_mix(z_all.permute(0, 2, 3, 1))
        return mixed.permute(0, 3, 1, 2)  # [B, 6, N, D]

    def heads_forward(
        self, z: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Flatten [B, 6, N, D] and apply the affine heads; returns raw
        (trend, mu, logvar), each [B, 6, T]."""
        cfg = self.cfg
        flat = z.reshape(*z.shape[:-2], cfg.N * cfg.D)
        B = flat.shape[0]
        shape = (B, 6, cfg.T)
        zero = flat.new_zeros(shape)
        trend = zero if cfg.no_trend_head else self.trend_head(flat)
        if cfg.no_res_head:
            mu = zero
            logvar = flat.new_full(shape, LOGVAR_FLOOR)
        else:
            mu = self.mu_head(flat)
            logvar = self.logvar_head(flat).clamp(*LOGVAR_CLAMP)
        return trend, mu, logvar

    def forward(self, x: torch.Tensor) -> ForecastDistribution:
        z = self.encode(x)
        trend_raw, mu_raw, logvar = self.heads_forward(z)
        trend, mu = output_filter(trend_raw, mu_raw, self.cfg)
        return ForecastDistribution(trend, mu, logvar)

    def frozen_parameter_names(self) -> list[str]:
        """Parameters excluded from training while the actuation path is
        masked (its encoder and embedding)."""
        if not self.cfg.mask_u:
            return []
        if self.cfg.shared_encoder:
            return []
        return [n for n, _ in self.named_parameters() if n.startswith("encoders.u.")]

    def trainable_parameters(self):
        frozen = set(self.frozen_parameter_names())
        return [p for n, p in self.named_parameters() if n not in frozen]


def output_filter(
    trend_raw: torch.Tensor, mu_raw: torch.Tensor, cfg: ModelConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Band-limit the raw head outputs.

    Normally the trend is low-passed at f_c and the residual mean
    band-passed to (f_c, f_c_dn]. When one head is ablated, the
    surviving output is low-passed with both cutoffs at f_c_dn; with
    no_fpf both pass through unchanged.
    """
    if cfg.no_fpf:
        return trend_raw, mu_raw
    if cfg.no_trend_head or cfg.no_res_head:
        wide = FilterSpec(cfg.f_c_dn, cfg.f_c_dn, cfg.sample_rate)
        if cfg.no_res_head:
            return filter_tensor(trend_raw, wide, "low"), mu_raw
        return trend_raw, filter_tensor(mu_raw, wide, "low")
    spec = cfg.spec
    trend = filter_tensor(trend_raw, spec, "low")
    mu = filter_tensor(mu_raw, spec, "high")
    return trend, mu


def gaussian_nll(
    target: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor
) -> torch.Tensor:
    """Mean per-element Gaussian negative log-likelihood (constant term
    dropped)."""
    var = torch.exp(logvar)
    return (0.5 * ((target - mu) ** 2 / var + logvar)).mean()


def loss(
    pred: ForecastDistribution,
    w_trend: torch.Tensor,
    w_res: torch.Tensor,
    cfg: ModelConfig | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Total loss = trend MSE + residual Gaussian NLL, both averaged
    over all 6T elements.

    With an ablated head the surviving component trains against the
    full-band wrench (trend + residual). Returns (total, trend term,
    residual term).
    """
    no_trend = cfg.no_trend_head if cfg is not None else False
    no_res = cfg.no_res_head if cfg is not None else False
    zero = pred.trend.sum() * 0.0
    if no_res:
        target = w_trend + w_res
        trend_term = ((target - pred.trend) ** 2).mean()
        res_term = zero
    elif no_trend:
        target = w_trend + w_res
        trend_term = zero
        res_term = gaussian_nll(target, pred.mu_res, pred.logvar_res)
    else:
        trend_term = ((w_trend - pred.trend) ** 2).mean()
        res_term = gaussian_nll(w_res, pred.mu_res, pred.logvar_res)
    total = trend_term + res_term
    if not torch.isfinite(total):
        raise ValueError(
            f"non-finite loss: trend={float(trend_term.detach())}, "
            f"residual={float(res_term.detach())}"
        )
    return total, trend_term, res_term


def embed_layout(x: np.ndarray, n_from: int, n_to: int) -> np.ndarray:
    """Embed a [5*n_from, L] input into the [5*n_to, L] layout by zero
    rows for the missing joints of every modality block (q0 included)."""
    if n_from > n_to:
        raise ValueError(f"cannot embed n={n_from} into n={n_to}")
    if x.shape[-2] != 5 * n_from:
        raise ValueError(f"expected {5 * n_from} rows, got {x.shape[-2]}")
    out = np.zeros((*x.shape[:-2], 5 * n_to, x.shape[-1]), dtype=x.dtype)
    for block in range(5):
        src = slice(block * n_from, block * n_from + n_from)
        dst = slice(block * n_to, block * n_to + n_from)
        out[..., dst, :] = x[..., src, :]
    return out
