"""Optimization loops, checkpoints, pretraining, and transfer.

Checkpoints are a binary parameter blob plus a plain-text manifest
carrying the full model configuration, normalization statistics, the
training seed, stage, and a content hash of the blob; a checkpoint only
loads against a matching configuration.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .baselines import PointMLP, SeqPatchForecaster, baseline_loss, window_to_baseline_input
from .data import (
    Episode,
    NormStats,
    SynthConfig,
    WindowSample,
    apply_norm,
    fit_norm,
    make_windows,
    normalize_wrench_decomp,
    synth_episode,
)
from .model import DecompForecaster, ModelConfig, embed_layout
from .model import loss as fdn_loss

STAGES = ("scratch", "pretrain", "linear_probe", "fine_tune")


@dataclass
class TrainConfig:
    batch: int = 64
    epochs: int = 5
    lr: float = 1e-3
    seed: int = 0
    stage: str = "scratch"
    iters: int | None = None  # overrides epochs when set
    grad_clip: float | None = 5.0
    snapshot_every: int = 50

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")


# --- checkpoints ---------------------------------------------------------

def _blob_path(path: str) -> str:
    return path if path.endswith(".pt") else path + ".pt"


def _manifest_path(path: str) -> str:
    return _blob_path(path)[:-3] + ".manifest.txt"


def save_checkpoint(
    model: torch.nn.Module,
    cfg: ModelConfig,
    stats: NormStats,
    path: str,
    stage: str = "scratch",
    seed: int = 0,
    kind: str = "fdn",
) -> str:
    blob = _blob_path(path)
    torch.save({"state_dict": model.state_dict()}, blob)
    with open(blob, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    manifest = {
        "kind": kind,
        "stage": stage,
        "seed": seed,
        "blob_sha256": digest,
        "config": cfg.to_dict(),
        "norm": stats.to_dict(),
        "revin_variance": "biased",
    }
    with open(_manifest_path(path), "w") as fh:
        for key, val in manifest.items():
            fh.write(f"{key} = {json.dumps(val)}\n")
    return blob


def read_manifest(path: str) -> dict:
    manifest = {}
    with open(_manifest_path(path)) as fh:
        for line in fh:
            if "=" in line:
                key, val = line.split("=", 1)
                manifest[key.strip()] = json.loads(val.strip())
    return manifest


_FREEZE_FLAGS = {"mask_u"}


def load_checkpoint(
    path: str,
    expect_cfg: ModelConfig | None = None,
    expect_stage: str | None = None,
) -> tuple[dict, ModelConfig, NormStats, dict]:
    """Load (state_dict, config, norm stats, manifest), verifying the
    blob hash and, when given, the requested config (freeze flags are
    allowed to differ) and stage."""
    manifest = read_manifest(path)
    blob = _blob_path(path)
    with open(blob, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise ValueError(f"checkpoint blob hash mismatch for {blob}")
    cfg = ModelConfig.from_dict(manifest["config"])
    if expect_stage is not None and manifest["stage"] != expect_stage:
        raise ValueError(
            f"checkpoint stage is {manifest['stage']!r}, expected {expect_stage!r}"
        )
    if expect_cfg is not None:
        got, want = cfg.to_dict(), expect_cfg.to_dict()
        diffs = {
            k for k in want if k not in _FREEZE_FLAGS and got.get(k) != want[k]
        }
        if diffs:
            raise ValueError(f"checkpoint config mismatch on fields {sorted(diffs)}")
    stats = NormStats.from_dict(manifest["norm"])
    state = torch.load(blob, map_location="cpu", weights_only=True)["state_dict"]
    return state, cfg, stats, manifest


# --- data preparation ----------------------------------------------------

def window_tensors(
    samples: list[WindowSample],
    stats: NormStats,
    embed_to: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack windows into normalized float32 tensors (X, W_trend, W_res).

    ``embed_to`` widens the input layout to a larger DoF count by zero
    rows (normalization applies in the target layout)."""
    X = np.stack([s.x for s in samples])
    if embed_to is not None:
        n_from = X.shape[1] // 5
        X = embed_layout(X, n_from, embed_to)
    X = apply_norm(X, stats)
    WT = np.stack([s.w_trend for s in samples])
    WR = np.stack([s.w_res for s in samples])
    WT, WR = normalize_wrench_decomp(WT, WR, stats)
    to = lambda a: torch.from_numpy(np.ascontiguousarray(a)).float()
    return to(X), to(WT), to(WR)


def point_tensors(
    episodes: list[Episode],
    stride: int = 1,
) -> tuple[torch.Tensor, torch.Tensor, NormStats]:
    """Per-step (input, wrench) pairs for the point estimator, with its
    own normalization statistics over the 4n absolute-position rows."""
    xs, ws = [], []
    for e in episodes:
        if "qd" not in e.meta:
            raise ValueError("episode lacks qd/qdd; run preprocess_episode first")
        rows = np.concatenate([e.q, e.meta["qd"], e.meta["qdd"], e.u])
        xs.append(rows[:, ::stride])
        ws.append(e.W[:, ::stride])
    X = np.concatenate(xs, axis=1)
    W = np.concatenate(ws, axis=1)
    x_mean, x_std = X.mean(axis=1), np.maximum(X.std(axis=1), 1e-8)
    w_mean, w_std = W.mean(axis=1), np.maximum(W.std(axis=1), 1e-8)
    stats = NormStats(x_mean, x_std, w_mean, w_std)
    Xn = ((X.T - x_mean) / x_std).astype(np.float32)
    Wn = ((W.T - w_mean) / w_std).astype(np.float32)
    return torch.from_numpy(Xn), torch.from_numpy(Wn), stats


def _compute_loss(model, xb, targets):
    """Dispatch per model family; returns (total, trend term, res term)."""
    if isinstance(model, DecompForecaster):
        wt, wr = targets
        pred = model(xb)
        return fdn_loss(pred, wt, wr, model.cfg)
    if isinstance(model, SeqPatchForecaster):
        wt, wr = targets
        xb = window_to_baseline_input(xb, model.cfg.n)
        total = baseline_loss(model, model(xb), wt + wr)
        return total, total.detach() * 0.0, total
    if isinstance(model, PointMLP):
        (wb,) = targets
        total = ((model(xb) - wb) ** 2).mean()
        return total, total, total.detach() * 0.0
    raise TypeError(f"unsupported model type {type(model).__name__}")


def train(
    model: torch.nn.Module,
    X: torch.Tensor,
    targets: tuple[torch.Tensor, ...],
    cfg: TrainConfig,
    parameters=None,
    log_path: str | None = None,
) -> list[dict]:
    """Adam loop with seed-determined shuffling.

    Returns the per-step loss history; also appends it to ``log_path``
    as comma-separated rows when given. A non-finite loss aborts and
    restores the most recent snapshot of the parameters."""
    if parameters is None:
        parameters = [p for p in model.parameters() if p.requires_grad]
    parameters = list(parameters)
    optimizer = torch.optim.Adam(parameters, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)

    n_samples = X.shape[0]
    history: list[dict] = []
    log = open(log_path, "a") if log_path else None
    if log and log.tell() == 0:
        log.write("step,total,trend,residual,wall_s\n")

    snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
    step = 0
    budget = cfg.iters
    start = time.perf_counter()
    model.train()
    try:
        epoch = 0
        while True:
            if budget is None and epoch >= cfg.epochs:
                break
            if budget is not None and step >= budget:
                break
            order = rng.permutation(n_samples)
            for i in range(0, n_samples, cfg.batch):
                if budget is not None and step >= budget:
                    break
                idx = torch.from_numpy(order[i : i + cfg.batch].copy())
                xb = X[idx]
                tb = tuple(t[idx] for t in targets)
                try:
                    total, trend_term, res_term = _compute_loss(model, xb, tb)
                    if not torch.isfinite(total):
                        raise ValueError(f"non-finite loss at step {step + 1}")
                except ValueError:
                    model.load_state_dict(snapshot)
                    raise
                optimizer.zero_grad()
                total.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(parameters, cfg.grad_clip)
                optimizer.step()
                step += 1
                rec = {
                    "step": step,
                    "total": float(total.detach()),
                    "trend": float(trend_term.detach()),
                    "residual": float(res_term.detach()),
                    "wall_s": time.perf_counter() - start,
                }
                history.append(rec)
                if log:
                    log.write(
                        f"{rec['step']},{rec['total']:.9g},{rec['trend']:.9g},"
                        f"{rec['residual']:.9g},{rec['wall_s']:.3f}\n"
                    )
                if step % cfg.snapshot_every == 0:
                    snapshot = {
                        k: v.detach().clone() for k, v in model.state_dict().items()
                    }
            epoch += 1
    finally:
        if log:
            log.close()
    model.eval()
    return history


# --- pretraining and transfer -------------------------------------------

@dataclass
class PretrainConfig:
    episodes: int = 12
    length_s: float = 120.0
    seed: int = 0
    data_util: float = 1.0  # fraction of the corpus actually used
    stride: int = 10
    model: ModelConfig | None = None
    train: TrainConfig | None = None

    def __post_init__(self):
        if not (0.0 < self.data_util <= 1.0):
            raise ValueError("data_util must be in (0, 1]")
        if self.model is None:
            self.model = ModelConfig(n=7, mask_u=True)
        if not self.model.mask_u or self.model.n != 7:
            raise ValueError("pretraining model must use n=7 with mask_u")
        if self.train is None:
            self.train = TrainConfig(stage="pretrain")
        self.train = replace(self.train, stage="pretrain")


def build_surrogate_corpus(pcfg: PretrainConfig) -> list[WindowSample]:
    """Window samples from a mixed 6/7-DoF low-frequency-dominant
    synthetic corpus, with 6-DoF samples embedded in the 7-DoF layout."""
    mcfg = pcfg.model
    samples: list[WindowSample] = []
    for i in range(pcfg.episodes):
        n = 7 if i % 2 == 0 else 6
        scfg = SynthConfig.pretraining(n=n, length_s=pcfg.length_s)
        e = synth_episode(scfg, seed=pcfg.seed * 1000 + i)
        wins = make_windows(e, mcfg.L, mcfg.T, pcfg.stride, mcfg.spec)
        if n < 7:
            for s in wins:
                s.x = embed_layout(s.x, n, 7)
        samples.extend(wins)
    if pcfg.data_util < 1.0:
        rng = np.random.default_rng(pcfg.seed)
        keep = rng.permutation(len(samples))[: max(1, int(len(samples) * pcfg.data_util))]
        samples = [samples[i] for i in sorted(keep)]
    if not samples:
        raise ValueError("surrogate corpus is empty")
    return samples


def masked_input_rows(n: int) -> np.ndarray:
    """Boolean mask over the 5n input rows marking the actuation block."""
    mask = np.zeros(5 * n, dtype=bool)
    mask[3 * n : 4 * n] = True
    return mask


def pretrain(pcfg: PretrainConfig, out_path: str, log_path: str | None = None):
    """Masked pretraining on the surrogate corpus; returns (model, stats,
    history) and writes a stage=pretrain checkpoint."""
    samples = build_surrogate_corpus(pcfg)
    mcfg = pcfg.model
    stats = fit_norm(samples, masked_rows=masked_input_rows(7))
    X, WT, WR = window_tensors(samples, stats)
    torch.manual_seed(pcfg.seed)
    model = DecompForecaster(mcfg)
    history = train(
        model, X, (WT, WR), pcfg.train,
        parameters=model.trainable_parameters(),
        log_path=log_path,
    )
    save_checkpoint(
        model, mcfg, stats, out_path, stage="pretrain", seed=pcfg.seed, kind="fdn"
    )
    return model, stats, history


TRANSFER_PREFIXES = ("encoders.dq.", "encoders.qd.", "encoders.qdd.", "q0_encoder.")


def transferred_parameter_names(model: DecompForecaster) -> list[str]:
    return [
        name
        for name, _ in model.named_parameters()
        if name.startswith(TRANSFER_PREFIXES)
    ]


def transfer(
    ckpt_path: str,
    samples: list[WindowSample],
    probe_cfg: TrainConfig,
    tune_cfg: TrainConfig,
    out_path: str,
    log_path: str | None = None,
):
    """Initialize the kinematic encoders from a pretrained checkpoint,
    linear-probe with them frozen, then fine-tune end to end.

    Downstream samples (n=6) are embedded into the pretraining 7-DoF
    layout. Pretraining input statistics are reused for the kinematic
    blocks; actuation-row and wrench statistics are fitted downstream.
    """
    state, pre_cfg, pre_stats, manifest = load_checkpoint(
        ckpt_path, expect_stage="pretrain"
    )
    mcfg = replace(pre_cfg, mask_u=False)
    torch.manual_seed(tune_cfg.seed)
    model = DecompForecaster(mcfg)
    own = model.state_dict()
    names = set(transferred_parameter_names(model))
    for name in names:
        own[name] = state[name]
    model.load_state_dict(own)

    down_stats = fit_norm(samples)
    n_from = samples[0].x.shape[0] // 5
    stats = _merge_transfer_stats(pre_stats, down_stats, n_from, mcfg.n)
    X, WT, WR = window_tensors(samples, stats, embed_to=mcfg.n)

    probe_params = [p for n_, p in model.named_parameters() if n_ not in names]
    train(model, X, (WT, WR), replace(probe_cfg, stage="linear_probe"),
          parameters=probe_params, log_path=log_path)
    train(model, X, (WT, WR), replace(tune_cfg, stage="fine_tune"),
          log_path=log_path)
    save_checkpoint(
        model, mcfg, stats, out_path, stage="fine_tune", seed=tune_cfg.seed, kind="fdn"
    )
    return model, stats


def _merge_transfer_stats(
    pre: NormStats, down: NormStats, n_from: int, n_to: int
) -> NormStats:
    """Pretraining stats for kinematic rows and q0, downstream stats for
    actuation rows and the wrench, in the wide layout."""
    x_mean = pre.x_mean.copy()
    x_std = pre.x_std.copy()
    for block in (3,):  # actuation block
        src = slice(block * n_from, (block + 1) * n_from)
        dst = slice(block * n_to, block * n_to + n_from)
        x_mean[dst] = down.x_mean[src]
        x_std[dst] = down.x_std[src]
    return NormStats(x_mean, x_std, down.w_mean.copy(), down.w_std.copy())


# --- prediction adapters -------------------------------------------------

def fdn_predictor(model: DecompForecaster, stats: NormStats, embed_to: int | None = None):
    """Batch predictor on physical scale: X [B, 5n, L] -> (mean, sigma)."""

    def predict(X: np.ndarray):
        x = np.asarray(X, dtype=np.float64)
        if embed_to is not None:
            x = embed_layout(x, x.shape[-2] // 5, embed_to)
        x = apply_norm(x, stats)
        with torch.no_grad():
            out = model(torch.from_numpy(x).float())
        std = stats.w_std[:, None]
        mean = out.predictive_mean.double().numpy() * std + stats.w_mean[:, None]
        sigma = out.sigma.double().numpy() * std
        return mean, sigma

    return predict


def seq_baseline_predictor(model: SeqPatchForecaster, stats: NormStats):
    def predict(X: np.ndarray):
        x = apply_norm(np.asarray(X, dtype=np.float64), stats)
        xb = window_to_baseline_input(torch.from_numpy(x).float(), model.cfg.n)
        with torch.no_grad():
            out = model(xb)
        std = stats.w_std[:, None]
        if model.gaussian:
            mean, logvar = out
            return (
                mean.double().numpy() * std + stats.w_mean[:, None],
                np.exp(logvar.double().numpy() / 2.0) * std,
            )
        return out.double().numpy() * std + stats.w_mean[:, None], None

    return predict


def point_predictor(model: PointMLP, stats: NormStats):
    """X_t [B, 4n] -> W_t [B, 6] on physical scale."""

    def predict(Xt: np.ndarray):
        x = (np.asarray(Xt, dtype=np.float64) - stats.x_mean) / stats.x_std
        with torch.no_grad():
            out = model(torch.from_numpy(x).float())
        return out.double().numpy() * stats.w_std + stats.w_mean

    return predict
