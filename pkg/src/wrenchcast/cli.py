"""Command-line entry point.

Subcommands: synth, preprocess, train, pretrain, transfer, evaluate,
ablate, spectrum, plot. Each reads an optional key-value config file
(flat ``key = value`` lines grouped in [sections]), applies flag
overrides, seeds all randomness from --seed, and writes outputs under
--out together with a run manifest.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import os
import sys
import time
import traceback

import numpy as np
import torch

from . import data as D
from . import evaluation as E
from . import training as TR
from .baselines import build_baseline
from .model import DecompForecaster, ModelConfig
from .spectral import FilterSpec, Series, energy_spectrum

ABLATION_FLAGS = (
    "no_fef",
    "no_fef_weights",
    "no_fef_moe",
    "no_fpf",
    "shared_encoder",
    "no_trend_head",
    "no_res_head",
)


def _load_config(path: str | None) -> dict:
    """Flat section.key -> string value mapping."""
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    parser.optionxform = str  # field names are case-sensitive
    with open(path) as fh:
        parser.read_file(fh)
    flat = {}
    for section in parser.sections():
        for key, val in parser[section].items():
            flat[f"{section}.{key}"] = val
    return flat


def _typed(cfg: dict, key: str, default, cast=None):
    if key not in cfg:
        return default
    raw = cfg[key]
    if cast is not None:
        return cast(raw)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _dataclass_from_config(cls, cfg: dict, section: str, **overrides):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{section}.{f.name}"
        if key in cfg:
            if f.type in ("int", int):
                kwargs[f.name] = int(cfg[key])
            elif f.type in ("float", float):
                kwargs[f.name] = float(cfg[key])
            elif f.type in ("bool", bool):
                kwargs[f.name] = cfg[key].strip().lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = cfg[key]
    kwargs.update(overrides)
    return cls(**kwargs)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir: str, args, inputs: list[str], outputs: list[str]):
    lines = [
        f"command = {args.command}",
        f"config = {getattr(args, 'config', None) or ''}",
        f"seed = {getattr(args, 'seed', '')}",
        f"timestamp = {time.strftime('%Y-%m-%dT%H:%M:%S')}",
    ]
    for p in inputs:
        if os.path.isfile(p):
            lines.append(f"input {p} = {_sha256(p)}")
        else:
            lines.append(f"input {p} = dir")
    for p in outputs:
        lines.append(f"output = {p}")
    with open(os.path.join(out_dir, "run_manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _episode_paths(data_dir: str) -> list[str]:
    paths = sorted(
        os.path.join(data_dir, f)
        for f in os.listdir(data_dir)
        if f.endswith(".csv")
    )
    if not paths:
        raise FileNotFoundError(f"no episode files under {data_dir}")
    return paths


def _load_episodes(data_dir: str, preprocess: bool, spec: FilterSpec):
    episodes = [D.load_episode(p) for p in _episode_paths(data_dir)]
    if preprocess:
        episodes = [D.preprocess_episode(e, spec) for e in episodes]
    return episodes


def _model_config(cfg: dict, **overrides) -> ModelConfig:
    return _dataclass_from_config(ModelConfig, cfg, "model", **overrides)


def _train_config(cfg: dict, seed: int, **overrides) -> TR.TrainConfig:
    return _dataclass_from_config(TR.TrainConfig, cfg, "train", seed=seed, **overrides)


# --- subcommands ---------------------------------------------------------

def cmd_synth(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    scfg = _dataclass_from_config(D.SynthConfig, cfg, "synth")
    outputs = []
    for i in range(args.episodes):
        e = D.synth_episode(scfg, seed=args.seed * 10_000 + i)
        path = os.path.join(args.out, f"episode_{i:03d}.csv")
        D.save_episode(e, path)
        outputs.append(path)
    write_run_manifest(args.out, args, [], outputs)
    print(f"wrote {len(outputs)} episodes to {args.out}")
    return 0


def cmd_preprocess(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    mcfg = _model_config(cfg)
    paths = _episode_paths(args.data)
    outputs = []
    for p in paths:
        e = D.preprocess_episode(D.load_episode(p), mcfg.spec)
        out_path = os.path.join(args.out, os.path.basename(p))
        D.save_episode(e, out_path)
        outputs.append(out_path)
    write_run_manifest(args.out, args, paths, outputs)
    print(f"preprocessed {len(outputs)} episodes into {args.out}")
    return 0


def _prepare_windows(args, cfg, mcfg):
    episodes = _load_episodes(args.data, preprocess=True, spec=mcfg.spec)
    train_eps, test_eps = D.split_episodes(episodes, seed=args.seed)
    stride = _typed(cfg, "data.stride", 1)
    train_windows = []
    for e in train_eps:
        train_windows.extend(D.make_windows(e, mcfg.L, mcfg.T, stride, mcfg.spec))
    return episodes, train_eps, test_eps, train_windows


def cmd_train(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    mcfg = _model_config(cfg)
    tcfg = _train_config(cfg, args.seed)
    _, train_eps, _, windows = _prepare_windows(args, cfg, mcfg)
    ckpt = os.path.join(args.out, "checkpoint")
    log = os.path.join(args.out, "train_log.csv")
    torch.manual_seed(args.seed)
    if args.baseline:
        model = build_baseline(args.baseline, mcfg)
        if args.baseline == "point_mlp":
            X, W, stats = TR.point_tensors(train_eps)
            TR.train(model, X, (W,), tcfg, log_path=log)
        else:
            stats = D.fit_norm(windows)
            X, WT, WR = TR.window_tensors(windows, stats)
            TR.train(model, X, (WT, WR), tcfg, log_path=log)
        TR.save_checkpoint(model, mcfg, stats, ckpt, stage=tcfg.stage,
                           seed=args.seed, kind=args.baseline)
    else:
        model = DecompForecaster(mcfg)
        stats = D.fit_norm(windows)
        X, WT, WR = TR.window_tensors(windows, stats)
        TR.train(model, X, (WT, WR), tcfg, log_path=log)
        TR.save_checkpoint(model, mcfg, stats, ckpt, stage=tcfg.stage,
                           seed=args.seed, kind="fdn")
    write_run_manifest(args.out, args, _episode_paths(args.data), [ckpt + ".pt"])
    print(f"checkpoint written to {ckpt}.pt")
    return 0


def cmd_pretrain(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    pcfg = _dataclass_from_config(
        TR.PretrainConfig, cfg, "pretrain",
        seed=args.seed, data_util=args.data_util / 100.0,
        model=_model_config(cfg, n=7, mask_u=True),
    )
    pcfg.train = _train_config(cfg, args.seed, stage="pretrain")
    ckpt = os.path.join(args.out, "checkpoint")
    TR.pretrain(pcfg, ckpt, log_path=os.path.join(args.out, "train_log.csv"))
    write_run_manifest(args.out, args, [], [ckpt + ".pt"])
    print(f"pretrained checkpoint written to {ckpt}.pt")
    return 0


def cmd_transfer(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    mcfg = _model_config(cfg, n=7)
    _, _, _, windows = _prepare_windows(args, cfg, mcfg)
    probe = _train_config(cfg, args.seed, stage="linear_probe")
    tune = _train_config(cfg, args.seed, stage="fine_tune")
    ckpt = os.path.join(args.out, "checkpoint")
    TR.transfer(args.model, windows, probe, tune, ckpt,
                log_path=os.path.join(args.out, "train_log.csv"))
    write_run_manifest(args.out, args, [args.model + ".pt"], [ckpt + ".pt"])
    print(f"transferred checkpoint written to {ckpt}.pt")
    return 0


def _predictor_for_checkpoint(path: str):
    state, mcfg, stats, manifest = TR.load_checkpoint(path)
    kind = manifest["kind"]
    torch.manual_seed(0)
    if kind == "fdn":
        model = DecompForecaster(mcfg)
        model.load_state_dict(state)
        model.eval()
        embed = mcfg.n if mcfg.n != 6 else None
        return TR.fdn_predictor(model, stats, embed_to=embed), mcfg, stats, "delay_compensated"
    model = build_baseline(kind, mcfg)
    model.load_state_dict(state)
    model.eval()
    if kind == "point_mlp":
        return TR.point_predictor(model, stats), mcfg, stats, "zoh_point"
    return TR.seq_baseline_predictor(model, stats), mcfg, stats, "delay_compensated"


def cmd_evaluate(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    predict, mcfg, stats, mode = _predictor_for_checkpoint(args.model)
    episodes = _load_episodes(args.data, preprocess=True, spec=mcfg.spec)
    delays = [E.DelaySpec(float(d), mode) for d in args.delays.split(",")]
    reports = E.evaluate(
        predict, episodes, delays, mcfg.spec, mcfg.L, mcfg.T,
        model_id=os.path.basename(args.model), norm_scale=stats.w_std,
    )
    report_path = os.path.join(args.out, "report.csv")
    E.write_report(reports, report_path)
    summary = E.summarize(reports)
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(summary + "\n")
    print(summary)
    write_run_manifest(args.out, args, [args.model + ".pt"], [report_path])
    return 0


def cmd_ablate(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    flags = [f.strip() for f in args.flags.split(",") if f.strip()]
    for f in flags:
        if f not in ABLATION_FLAGS:
            raise ValueError(f"unknown ablation flag {f!r}; choose from {ABLATION_FLAGS}")
    base_cfg = _model_config(cfg)
    tcfg = _train_config(cfg, args.seed)
    episodes = _load_episodes(args.data, preprocess=True, spec=base_cfg.spec)
    train_eps, test_eps = D.split_episodes(episodes, seed=args.seed)
    stride = _typed(cfg, "data.stride", 1)
    delays = [E.DelaySpec(float(d)) for d in args.delays.split(",")]
    rows = ["variant,delay_ms,wrmse_force,wrmse_torque,prmse_force,prmse_torque,crps_force,crps_torque"]
    for variant in ["full"] + flags:
        mcfg = (
            base_cfg
            if variant == "full"
            else dataclasses.replace(base_cfg, **{variant: True})
        )
        windows = []
        for e in train_eps:
            windows.extend(D.make_windows(e, mcfg.L, mcfg.T, stride, mcfg.spec))
        torch.manual_seed(args.seed)
        model = DecompForecaster(mcfg)
        stats = D.fit_norm(windows)
        X, WT, WR = TR.window_tensors(windows, stats)
        TR.train(model, X, (WT, WR), tcfg)
        model.eval()
        predict = TR.fdn_predictor(model, stats)
        reports = E.evaluate(
            predict, test_eps, delays, mcfg.spec, mcfg.L, mcfg.T,
            model_id=variant, norm_scale=stats.w_std,
        )
        phys = [r for r in reports if not r.normalized]
        for d in delays:
            sub = [r for r in phys if r.delay_ms == d.t_delay_ms]
            agg = {
                k: float(np.mean([r.aggregates[k] for r in sub]))
                for k in sub[0].aggregates
            }
            rows.append(
                f"{variant},{d.t_delay_ms:g},{agg['wrmse_force']:.6g},"
                f"{agg['wrmse_torque']:.6g},{agg['prmse_force']:.6g},"
                f"{agg['prmse_torque']:.6g},{agg['crps_force']:.6g},"
                f"{agg['crps_torque']:.6g}"
            )
        print(f"ablation variant {variant} done")
    table = os.path.join(args.out, "ablation.csv")
    with open(table, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    write_run_manifest(args.out, args, _episode_paths(args.data), [table])
    print(f"ablation table written to {table}")
    return 0


def cmd_spectrum(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    mcfg = _model_config(cfg)
    episodes = _load_episodes(args.data, preprocess=False, spec=mcfg.spec)
    win_steps = _typed(cfg, "eval.spectrum_window", 5000)
    windows = []
    for e in episodes:
        for s0 in range(0, e.steps - win_steps + 1, win_steps):
            windows.append(Series(e.W[:, s0 : s0 + win_steps], e.sample_rate))
    if not windows:
        raise ValueError(f"episodes shorter than the {win_steps}-step spectrum window")
    freqs, spec = energy_spectrum(windows)
    path = os.path.join(args.out, "spectrum.csv")
    header = "freq_hz," + ",".join(E.CHANNELS)
    np.savetxt(path, np.column_stack([freqs, spec.T]), delimiter=",",
               header=header, comments="", fmt="%.8g")
    write_run_manifest(args.out, args, _episode_paths(args.data), [path])
    print(f"spectrum written to {path}")
    return 0


def cmd_plot(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    predict, mcfg, stats, mode = _predictor_for_checkpoint(args.model)
    episodes = _load_episodes(args.data, preprocess=True, spec=mcfg.spec)
    delays = [E.DelaySpec(float(d), mode) for d in args.delays.split(",")]
    outputs = []
    for i, e in enumerate(episodes):
        for d in delays:
            recon, sigma, valid = E.reconstruct_episode(
                predict, e, d, mcfg.L, mcfg.T
            )
            path = os.path.join(args.out, f"recon_ep{i:03d}_{d.t_delay_ms:g}ms.png")
            E.plot_reconstruction(e, recon, sigma, valid, path)
            outputs.append(path)
    write_run_manifest(args.out, args, _episode_paths(args.data), outputs)
    print(f"wrote {len(outputs)} plots to {args.out}")
    return 0


# --- driver --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wrenchcast",
        description="Wrench forecasting: synthesis, training, transfer, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, model=False, delays=False):
        p.add_argument("--config", default=None, help="key-value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("data", help="episode directory")
        if model:
            p.add_argument("--model", required=True, help="checkpoint path (without .pt)")
        if delays:
            p.add_argument("--delays", default="100,1000", help="delays in ms, comma-separated")

    p = sub.add_parser("synth", help="generate synthetic episodes")
    common(p)
    p.add_argument("--episodes", type=int, default=12)

    common(sub.add_parser("preprocess", help="denoise/derive/offset-correct episodes"), data=True)

    p = sub.add_parser("train", help="train the forecaster or a baseline")
    common(p, data=True)
    p.add_argument("--baseline", default=None,
                   choices=["point_mlp", "seq2seq_patch", "seq2seq_patch_gaussian"])
    p.add_argument("--stage", default="scratch")

    p = sub.add_parser("pretrain", help="masked pretraining on the surrogate corpus")
    common(p)
    p.add_argument("--data-util", type=float, default=100.0,
                   help="percentage of the surrogate corpus to use")

    p = sub.add_parser("transfer", help="linear probe then fine-tune from a checkpoint")
    common(p, data=True, model=True)
    p.add_argument("--stage", default="fine_tune")

    common(sub.add_parser("evaluate", help="delayed-estimation metrics"),
           data=True, model=True, delays=True)

    p = sub.add_parser("ablate", help="train+evaluate one run per ablation flag")
    common(p, data=True, delays=True)
    p.add_argument("--flags", default=",".join(ABLATION_FLAGS))

    common(sub.add_parser("spectrum", help="wrench energy spectrum"), data=True)

    common(sub.add_parser("plot", help="reconstruction overlay plots"),
           data=True, model=True, delays=True)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "pretrain": cmd_pretrain,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "spectrum": cmd_spectrum,
    "plot": cmd_plot,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = _load_config(args.config)
        np.random.seed(args.seed)
        torch.manual_seed(args.seed)
        return COMMANDS[args.command](args, cfg)
    except Exception:
        stage = getattr(args, "command", "startup")
        print(f"error during {stage!r}:", file=sys.stderr)
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
