"""Comparison models sharing the dataset and evaluation contracts.

Three representatives: a per-step feed-forward regressor, a patch
transformer sequence forecaster, and its Gaussian variant that emits
step/channel-wise distribution parameters over the full band. All of
them consume the same window samples as the decomposition forecaster;
their input uses absolute joint positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .model import (
    LOGVAR_CLAMP,
    ModelConfig,
    SequenceEncoder,
    gaussian_nll,
    revin_invert,
    revin_norm,
)

BASELINE_KINDS = ("point_mlp", "seq2seq_patch", "seq2seq_patch_gaussian")


def window_to_baseline_input(x: torch.Tensor, n: int) -> torch.Tensor:
    """[..., 5n, L] window input -> [..., 4n, L] with absolute positions.

    The window layout carries relative positions and a broadcast initial
    position; baselines use q = dq + q0 plus the other three modalities.
    """
    if x.shape[-2] != 5 * n:
        raise ValueError(f"expected {5 * n} rows, got {x.shape[-2]}")
    q = x[..., :n, :] + x[..., 4 * n :, :]
    return torch.cat([q, x[..., n : 4 * n, :]], dim=-2)


class PointMLP(nn.Module):
    """Feed-forward regression from a single-step input [4n] to the
    6-channel wrench."""

    def __init__(self, n: int, width: int = 256, depth: int = 3):
        super().__init__()
        layers: list[nn.Module] = []
        d_in = 4 * n
        for _ in range(depth - 1):
            layers += [nn.Linear(d_in, width), nn.GELU()]
            d_in = width
        layers.append(nn.Linear(d_in, 6))
        self.net = nn.Sequential(*layers)
        self.n = n

    def forward(self, x_t: torch.Tensor) -> torch.Tensor:
        if x_t.shape[-1] != 4 * self.n:
            raise ValueError(f"expected [..., {4 * self.n}], got {tuple(x_t.shape)}")
        return self.net(x_t)


class SeqPatchForecaster(nn.Module):
    """Patch transformer over the 4n input channels with instance
    normalization inverted on the representations, a channel-mixing
    projection to 6 channels, and one affine horizon head per output.

    With ``gaussian=True`` the head pair emits (mu, logvar) of a full-
    band step/channel-wise Gaussian; otherwise a point forecast.
    """

    def __init__(self, cfg: ModelConfig, gaussian: bool = False):
        super().__init__()
        self.cfg = cfg
        self.gaussian = gaussian
        self.encoder = SequenceEncoder(cfg)
        self.channel_mix = nn.Linear(4 * cfg.n, 6)
        width = cfg.N * cfg.D
        self.head = nn.Linear(width, cfg.T)
        if gaussian:
            self.logvar_head = nn.Linear(width, cfg.T)

    def forward(self, x: torch.Tensor):
        cfg = self.cfg
        if x.shape[-2] != 4 * cfg.n or x.shape[-1] != cfg.L:
            raise ValueError(f"expected [B, {4 * cfg.n}, {cfg.L}], got {tuple(x.shape)}")
        xn, stats = revin_norm(x)
        z = self.encoder(xn)
        z = revin_invert(z, stats)
        mixed = self.channel_mix(z.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        flat = mixed.reshape(*mixed.shape[:-2], cfg.N * cfg.D)
        mean = self.head(flat)
        if not self.gaussian:
            return mean
        logvar = self.logvar_head(flat).clamp(*LOGVAR_CLAMP)
        return mean, logvar


@dataclass
class BaselineLoss:
    total: torch.Tensor
    detail: str


def baseline_loss(model: nn.Module, pred, target: torch.Tensor) -> torch.Tensor:
    """MSE for point models, Gaussian NLL for the gaussian forecaster.

    The NLL is the same implementation used by the decomposition
    forecaster's residual head."""
    if isinstance(model, SeqPatchForecaster) and model.gaussian:
        mean, logvar = pred
        return gaussian_nll(target, mean, logvar)
    return ((pred - target) ** 2).mean()


def build_baseline(kind: str, cfg: ModelConfig) -> nn.Module:
    if kind == "point_mlp":
        return PointMLP(cfg.n)
    if kind == "seq2seq_patch":
        return SeqPatchForecaster(cfg, gaussian=False)
    if kind == "seq2seq_patch_gaussian":
        return SeqPatchForecaster(cfg, gaussian=True)
    raise ValueError(f"unknown baseline kind {kind!r}; choose from {BASELINE_KINDS}")
