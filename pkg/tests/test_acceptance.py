"""End-to-end acceptance checks.

Each test prints a single PASS/FAIL line. The heavier checks share a
session-scoped synthetic corpus (12 episodes of 3 minutes at 100 Hz,
split 8 train / 4 held-out).
"""

import dataclasses
import gc
import hashlib
import math
import os
import time
import warnings

import numpy as np
import pytest
import torch
from scipy.stats import norm

from wrenchcast.baselines import build_baseline
from wrenchcast.data import (
    Episode,
    SynthConfig,
    fit_norm,
    make_windows,
    split_episodes,
    synth_episode,
)
from wrenchcast.evaluation import (
    DelaySpec,
    crps_deterministic,
    crps_gaussian,
    evaluate,
    prmse,
    reconstruct_episode,
    wrmse,
    wrmse_expected,
)
from wrenchcast.model import DecompForecaster, ModelConfig, embed_layout
from wrenchcast.model import loss as forecaster_loss
from wrenchcast.spectral import (
    FilterSpec,
    Series,
    decompose,
    fpf_low,
    highpass_response,
    lowpass_response,
)
from wrenchcast.training import (
    PretrainConfig,
    TrainConfig,
    pretrain,
    seq_baseline_predictor,
    train,
    transfer,
    window_tensors,
)
from wrenchcast.training import fdn_predictor

SPEC = FilterSpec(1.0, 15.0, 100.0)


def _report(name: str, ok: bool, detail: str):
    print(f"\n[acceptance] {name}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"{name}: {detail}"


# --- shared synthetic corpus ---------------------------------------------

@pytest.fixture(scope="session")
def corpus():
    cfg = SynthConfig(length_s=180.0)
    episodes = [synth_episode(cfg, seed=100 + i) for i in range(12)]
    train_eps, test_eps = split_episodes(episodes, seed=0)
    assert len(train_eps) == 8 and len(test_eps) == 4
    return train_eps, test_eps


@pytest.fixture(scope="session")
def full_scale_run(corpus):
    """Train the forecaster and the deterministic sequence baseline at
    full scale on the shared corpus and score the held-out episodes."""
    train_eps, test_eps = corpus
    mcfg = ModelConfig()
    start = time.perf_counter()

    windows = []
    for e in train_eps:
        windows.extend(make_windows(e, mcfg.L, mcfg.T, 10, mcfg.spec))
    stats = fit_norm(windows)
    X, WT, WR = window_tensors(windows, stats)
    del windows
    gc.collect()

    tcfg = TrainConfig(batch=64, epochs=5, seed=0)
    torch.manual_seed(0)
    fdn = DecompForecaster(mcfg)
    train(fdn, X, (WT, WR), tcfg)
    torch.manual_seed(0)
    seq = build_baseline("seq2seq_patch", mcfg)
    train(seq, X, (WT, WR), tcfg)
    del X, WT, WR
    gc.collect()

    delay = DelaySpec(100.0)
    fdn_pred = fdn_predictor(fdn, stats)
    seq_pred = seq_baseline_predictor(seq, stats)
    fdn_reports = evaluate(fdn_pred, test_eps, [delay], mcfg.spec,
                           mcfg.L, mcfg.T, model_id="fdn")
    seq_reports = evaluate(seq_pred, test_eps, [delay], mcfg.spec,
                           mcfg.L, mcfg.T, model_id="seq2seq")

    # sigma-envelope tracking on the moving region of each held-out episode
    num = den = 0.0
    for e in test_eps:
        _, sigma, valid = reconstruct_episode(fdn_pred, e, delay, mcfg.L, mcfg.T)
        sel = valid & (e.timestamps >= e.static_end_s + 1.0)
        diff = sigma[:, sel] - e.meta["sigma"][:, sel]
        num += float((diff**2).sum())
        den += float((e.meta["sigma"][:, sel] ** 2).sum())
    sigma_rel_rms = math.sqrt(num / den)

    return {
        "fdn_reports": fdn_reports,
        "seq_reports": seq_reports,
        "sigma_rel_rms": sigma_rel_rms,
        "elapsed": time.perf_counter() - start,
    }


# --- criteria ------------------------------------------------------------

def _oracle_lowpass(f, cutoff, r=8):
    f = np.asarray(f, dtype=np.longdouble)
    return 1.0 / np.sqrt(1.0 + (f / np.longdouble(cutoff)) ** (2 * r))


def _oracle_lowpass_complement(f, cutoff, r=8):
    # algebraically exact rewrite of 1 - 1/sqrt(1+x), stable for small x
    x = (np.asarray(f, dtype=np.longdouble) / np.longdouble(cutoff)) ** (2 * r)
    root = np.sqrt(1.0 + x)
    return x / (root * (1.0 + root))


def test_filter_response_precision():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    freqs = np.concatenate([
        rng.uniform(0.0, 50.0, 500),
        np.exp(rng.uniform(np.log(1e-3), np.log(50.0), 500)),
    ])
    low = lowpass_response(freqs, SPEC)
    high = highpass_response(freqs, SPEC)
    low_ref = _oracle_lowpass(freqs, SPEC.f_c)
    high_ref = _oracle_lowpass_complement(freqs, SPEC.f_c) * _oracle_lowpass(
        freqs, SPEC.f_c_dn
    )
    rel_low = np.max(np.abs(low.astype(np.longdouble) - low_ref) / low_ref)
    rel_high = np.max(np.abs(high.astype(np.longdouble) - high_ref) / high_ref)

    steps = 4096
    t = np.arange(steps) / SPEC.sample_rate
    tone = np.sin(2.0 * np.pi * 2.0 * SPEC.f_c * t)[None, :]
    out = fpf_low(Series(tone, SPEC.sample_rate), SPEC).values
    interior = slice(steps // 4, 3 * steps // 4)
    gain = np.sqrt((out[0, interior] ** 2).mean() / (tone[0, interior] ** 2).mean())
    expected = 1.0 / math.sqrt(1.0 + 2.0**16)
    gain_rel = abs(gain - expected) / expected
    elapsed = time.perf_counter() - start

    ok = rel_low < 1e-12 and rel_high < 1e-12 and gain_rel < 1e-2 and elapsed < 5.0
    _report(
        "filter response precision", ok,
        f"rel err low={float(rel_low):.2e} high={float(rel_high):.2e}, "
        f"2*f_c gain rel err={gain_rel:.2e}, {elapsed:.2f}s",
    )


def test_decomposition_identity():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        steps = int(rng.integers(50, 500))
        x = rng.standard_normal((6, steps))
        trend, res = decompose(Series(x, SPEC.sample_rate), SPEC)
        worst = max(worst, float(np.max(np.abs(trend.values + res.values - x))))
    _report("decomposition identity", worst <= 1e-12,
            f"max |trend + residual - input| = {worst:.2e} over 100 windows")


def test_gradient_fidelity():
    start = time.perf_counter()
    cfg = ModelConfig(n=2, L=16, T=16, D=8, P=4, M=2, depth=1, heads=2)
    torch.manual_seed(0)
    model = DecompForecaster(cfg).double()
    model.eval()
    rng = np.random.default_rng(0)
    X = torch.from_numpy(rng.standard_normal((4, 10, 16)))
    WT = torch.from_numpy(rng.standard_normal((4, 6, 16)))
    WR = torch.from_numpy(0.3 * rng.standard_normal((4, 6, 16)))

    def f():
        total, _, _ = forecaster_loss(model(X), WT, WR, cfg)
        return total

    model.zero_grad()
    f().backward()
    h = 1e-5
    worst = 0.0
    worst_name = ""
    for name, p in model.named_parameters():
        flat = p.detach().view(-1)
        grad = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
        for idx in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
                up = float(f().detach())
                flat[idx] = orig - h
                down = float(f().detach())
                flat[idx] = orig
            fd = (up - down) / (2.0 * h)
            an = float(grad[idx])
            if max(abs(fd), abs(an)) < 1e-10:
                continue
            rel = abs(fd - an) / max(abs(fd), abs(an))
            if rel > worst:
                worst, worst_name = rel, name
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 120.0
    _report("gradient fidelity", ok,
            f"worst rel err {worst:.2e} ({worst_name}), {elapsed:.1f}s")


def test_metric_oracles():
    rng = np.random.default_rng(2)
    worst_metric = 0.0
    for _ in range(20):
        ch, steps, w = 3, int(rng.integers(30, 120)), int(rng.integers(2, 15))
        a = rng.standard_normal((ch, steps))
        b = rng.standard_normal((ch, steps))
        s = np.abs(rng.standard_normal((ch, steps)))

        def brute_rms(x):
            return np.array([
                [np.sqrt((x[c, i : i + w] ** 2).mean()) for i in range(steps - w + 1)]
                for c in range(ch)
            ])

        ref_w = np.sqrt(((brute_rms(a) - brute_rms(b)) ** 2).mean(axis=1))
        ref_we = np.sqrt(
            ((brute_rms(np.sqrt(a**2 + s**2)) - brute_rms(b)) ** 2).mean(axis=1)
        )
        ref_p = np.sqrt(((a - b) ** 2).mean(axis=1))
        worst_metric = max(
            worst_metric,
            float(np.max(np.abs(wrmse(a, b, w) - ref_w))),
            float(np.max(np.abs(wrmse_expected(a, s, b, w) - ref_we))),
            float(np.max(np.abs(prmse(a, b) - ref_p))),
        )

    worst_crps = 0.0
    for _ in range(100):
        mu = float(rng.normal(0.0, 3.0))
        sigma = float(np.abs(rng.normal(0.0, 2.0))) + 0.05
        y = float(rng.normal(mu, 2.0 * sigma))
        # integrate the squared CDF difference piecewise, splitting at the
        # observation so the step discontinuity costs no trapezoid error
        x = mu + sigma * np.arange(-10.0, 10.0, 1e-3)
        xl = np.append(x[x < y], y)
        xr = np.insert(x[x > y], 0, y)
        ref = np.trapezoid(norm.cdf((xl - mu) / sigma) ** 2, xl) + np.trapezoid(
            (norm.cdf((xr - mu) / sigma) - 1.0) ** 2, xr
        )
        worst_crps = max(worst_crps, abs(float(crps_gaussian(mu, sigma, y)) - ref))

    pred = rng.standard_normal((6, 50))
    obs = rng.standard_normal((6, 50))
    exact_mae = np.array_equal(crps_deterministic(pred, obs), np.abs(obs - pred))

    ok = worst_metric < 1e-10 and worst_crps < 1e-4 and exact_mae
    _report("metric oracles", ok,
            f"band metrics max err {worst_metric:.2e}, "
            f"CRPS vs integration max err {worst_crps:.2e}, "
            f"point CRPS == MAE: {exact_mae}")


def _mean_aggregate(reports, key):
    phys = [r for r in reports if not r.normalized]
    return float(np.mean([r.aggregates[key] for r in phys]))


def test_distribution_recovery_and_baseline_ordering(full_scale_run):
    run = full_scale_run
    fdn_w = _mean_aggregate(run["fdn_reports"], "wrmse_force")
    seq_w = _mean_aggregate(run["seq_reports"], "wrmse_force")
    ok = (
        run["sigma_rel_rms"] < 0.25
        and fdn_w < seq_w
        and run["elapsed"] < 1800.0
    )
    _report(
        "distribution recovery", ok,
        f"sigma track rel RMS {run['sigma_rel_rms']:.3f}, "
        f"force wRMSE fdn={fdn_w:.2f} vs seq2seq={seq_w:.2f}, "
        f"{run['elapsed'] / 60.0:.1f} min",
    )


def test_ablation_direction(corpus):
    train_eps, test_eps = corpus
    base = ModelConfig(D=32, M=8, depth=1, heads=4)
    windows = []
    for e in train_eps:
        windows.extend(make_windows(e, base.L, base.T, 50, base.spec))
    stats = fit_norm(windows)
    X, WT, WR = window_tensors(windows, stats)
    del windows
    delay = DelaySpec(100.0)

    def run(mcfg, seed):
        torch.manual_seed(seed)
        model = DecompForecaster(mcfg)
        train(model, X, (WT, WR), TrainConfig(batch=64, epochs=2, seed=seed))
        reports = evaluate(fdn_predictor(model, stats), test_eps, [delay],
                           mcfg.spec, mcfg.L, mcfg.T)
        return (
            float(np.mean([r.wrmse.mean() for r in reports])),
            float(np.mean([r.prmse.mean() for r in reports])),
        )

    res_votes = trend_votes = 0
    details = []
    for seed in (0, 1, 2):
        full_w, full_p = run(base, seed)
        ab_w, _ = run(dataclasses.replace(base, no_res_head=True), seed)
        _, ab_p = run(dataclasses.replace(base, no_trend_head=True), seed)
        res_votes += ab_w > full_w
        trend_votes += ab_p > full_p
        details.append(
            f"seed {seed}: wRMSE {full_w:.2f}->{ab_w:.2f}, "
            f"pRMSE {full_p:.2f}->{ab_p:.2f}"
        )
    ok = res_votes >= 2 and trend_votes >= 2
    _report("ablation direction", ok,
            f"residual-head votes {res_votes}/3, trend-head votes "
            f"{trend_votes}/3 ({'; '.join(details)})")


def test_actuation_masking_invariance(tmp_path):
    mcfg = ModelConfig(n=7, L=50, T=50, D=8, P=10, M=2, depth=1, heads=2,
                       mask_u=True)
    pcfg = PretrainConfig(
        episodes=2, length_s=60.0, seed=0, stride=10, model=mcfg,
        train=TrainConfig(batch=32, iters=1000, stage="pretrain"),
    )

    def u_hash(model):
        h = hashlib.sha256()
        for name, p in sorted(model.named_parameters()):
            if name.startswith("encoders.u."):
                h.update(p.detach().numpy().tobytes())
        return h.hexdigest()

    torch.manual_seed(pcfg.seed)
    init_hash = u_hash(DecompForecaster(mcfg))
    model, stats, history = pretrain(pcfg, str(tmp_path / "pre"))
    hashes_equal = u_hash(model) == init_hash and len(history) == 1000

    model.eval()
    torch.manual_seed(1)
    x = torch.randn(2, 35, 50)
    x2 = x.clone()
    x2[:, 21:28] += torch.randn(2, 7, 50)
    with torch.no_grad():
        a, b = model(x), model(x2)
    invariant = (
        torch.equal(a.trend, b.trend)
        and torch.equal(a.mu_res, b.mu_res)
        and torch.equal(a.logvar_res, b.logvar_res)
    )
    _report("actuation masking invariance", hashes_equal and invariant,
            f"u-encoder hash unchanged after 1000 steps: {hashes_equal}, "
            f"outputs bitwise invariant to u perturbation: {invariant}")


def test_transfer_benefit(corpus, tmp_path):
    train_eps, test_eps = corpus
    pre_mcfg = ModelConfig(n=7, L=50, T=50, D=16, P=10, M=4, depth=1,
                           heads=2, mask_u=True)
    pcfg = PretrainConfig(
        episodes=6, length_s=120.0, seed=0, stride=10, model=pre_mcfg,
        train=TrainConfig(batch=64, epochs=6, stage="pretrain"),
    )
    pre_path = str(tmp_path / "pre")
    pretrain(pcfg, pre_path)

    # scarce downstream data: transfer matters when the target corpus is
    # small relative to the surrogate corpus
    windows = []
    for e in train_eps[:2]:
        windows.extend(make_windows(e, pre_mcfg.L, pre_mcfg.T, 100, pre_mcfg.spec))
    delay = DelaySpec(100.0)

    def crps_of(model, stats):
        reports = evaluate(
            fdn_predictor(model, stats, embed_to=7), test_eps, [delay],
            pre_mcfg.spec, pre_mcfg.L, pre_mcfg.T,
        )
        return float(np.mean([r.crps.mean() for r in reports]))

    votes = 0
    details = []
    for seed in (0, 1, 2):
        probe = TrainConfig(batch=64, epochs=10, seed=seed)
        tune = TrainConfig(batch=64, epochs=10, seed=seed)
        fine_model, fine_stats = transfer(
            pre_path, windows, probe, tune, str(tmp_path / f"fine{seed}")
        )
        fine = crps_of(fine_model, fine_stats)

        # scratch arm: same architecture, data, and step budget
        mcfg = dataclasses.replace(pre_mcfg, mask_u=False)
        torch.manual_seed(seed)
        scratch_model = DecompForecaster(mcfg)
        embedded = [
            dataclasses.replace(w, x=embed_layout(w.x, 6, 7)) for w in windows
        ]
        dead = np.zeros(35, dtype=bool)
        dead[6::7] = True  # zero rows of the embedded seventh joint
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scratch_stats = fit_norm(embedded, masked_rows=dead)
        X, WT, WR = window_tensors(windows, scratch_stats, embed_to=7)
        train(scratch_model, X, (WT, WR), dataclasses.replace(probe, stage="scratch"))
        train(scratch_model, X, (WT, WR), dataclasses.replace(tune, stage="scratch"))
        scratch = crps_of(scratch_model, scratch_stats)

        votes += fine <= scratch
        details.append(f"seed {seed}: fine {fine:.2f} vs scratch {scratch:.2f}")
    _report("transfer benefit", votes >= 2,
            f"fine-tuned CRPS <= scratch in {votes}/3 seeds ({'; '.join(details)})")


SLOPE = 1e-3


def _indexable_episode(steps=1500, n=6, fs=100.0, seed=0):
    """Ramping joint positions encode the time index so oracles can
    recover the prediction time from any input window."""
    rng = np.random.default_rng(seed)
    slopes = SLOPE * (1.0 + np.arange(n))
    idx = np.arange(steps, dtype=float)
    W = decompose(Series(rng.standard_normal((6, steps)) * 10.0, fs), SPEC)[0].values
    W = W + rng.standard_normal((6, steps))
    return Episode(
        timestamps=idx / fs,
        q=slopes[:, None] * idx,
        u=rng.standard_normal((n, steps)),
        W=W,
        q0=np.zeros(n),
        sample_rate=fs,
        static_end_s=1.0,
        meta={
            "qd": np.tile(slopes[:, None] * fs, (1, steps)),
            "qdd": np.zeros((n, steps)),
            "seed": seed,
        },
    )


def test_delay_protocol_oracles():
    e = _indexable_episode()
    L = T = 100

    def forecast_oracle(X):
        B = X.shape[0]
        means = np.zeros((B, 6, T))
        for b in range(B):
            t = int(round(X[b, 0, -1] / SLOPE))
            fut = e.W[:, t + 1 : t + 1 + T]
            means[b, :, : fut.shape[1]] = fut
        return means, np.zeros((B, 6, T))

    reports = evaluate(forecast_oracle, [e],
                       [DelaySpec(100.0), DelaySpec(1000.0)], SPEC, L, T)
    forecast_zero = all(
        float(r.wrmse.max()) == 0.0
        and float(r.prmse.max()) == 0.0
        and float(r.crps.max()) == 0.0
        for r in reports
    )

    def point_oracle(Xt):
        out = np.zeros((Xt.shape[0], 6))
        for b in range(Xt.shape[0]):
            out[b] = e.W[:, int(round(Xt[b, 0] / SLOPE))]
        return out

    recon, sigma, valid = reconstruct_episode(
        point_oracle, e, DelaySpec(100.0, "zoh_point"), L
    )
    sel = np.flatnonzero(valid)
    zoh_shift = sigma is None and np.array_equal(recon[:, sel], e.W[:, sel - 10])

    _report("delay protocol oracles", forecast_zero and zoh_shift,
            f"forecast oracle metrics all zero at 100/1000 ms: {forecast_zero}, "
            f"point oracle equals truth shifted by k: {zoh_shift}")


def test_pipeline_determinism(tmp_path):
    from wrenchcast.cli import run as cli_run

    cfg_path = tmp_path / "config.ini"
    cfg_path.write_text(
        "[synth]\nlength_s = 8.0\n"
        "[model]\nL = 50\nT = 50\nD = 8\nP = 10\nM = 2\ndepth = 1\nheads = 2\n"
        "[train]\nbatch = 16\nepochs = 1\n"
        "[data]\nstride = 25\n"
    )
    reports = []
    for tag in ("run1", "run2"):
        root = tmp_path / tag
        data, model, out = str(root / "data"), str(root / "model"), str(root / "eval")
        assert cli_run(["synth", "--config", str(cfg_path), "--seed", "11",
                        "--out", data, "--episodes", "3"]) == 0
        assert cli_run(["train", "--config", str(cfg_path), "--seed", "11",
                        "--out", model, data]) == 0
        assert cli_run(["evaluate", "--config", str(cfg_path), "--seed", "11",
                        "--out", out, "--model", os.path.join(model, "checkpoint"),
                        "--delays", "100,500", data]) == 0
        reports.append(open(os.path.join(out, "report.csv")).read())
    identical = reports[0] == reports[1]
    _report("pipeline determinism", identical,
            f"two seeded synth->train->evaluate runs wrote identical "
            f"reports: {identical}")
