"""Acceptance criteria 1-10.

Each criterion prints one ``criterion N: PASS|FAIL ...`` line. Trained runs
come from :mod:`edvr.experiments` and are cached on disk, so the first
invocation trains (about two hours on one CPU core) and later ones only
evaluate. Run directly with ``python tests/test_acceptance.py`` or through
pytest.
"""
import functools
import math
import os
import tempfile
import time

import numpy as np
import pytest

from edvr import experiments as X
from edvr import io
from edvr import tensor as T
from edvr.cli import main as cli_main
from edvr.cli import save_model
from edvr.deform import deform_conv2d
from edvr.gradsuite import run_suite
from edvr.inference import restore_clip, self_ensemble_infer
from edvr.metrics import psnr, rgb_to_y, ssim
from edvr.model import EDVR, EdvrConfig
from edvr.synth import render_video
from edvr.training import TrainConfig, charbonnier_loss, smoothed, train

pytestmark = pytest.mark.slow


@functools.lru_cache(maxsize=None)
def cache():
    return X.RunCache()


@functools.lru_cache(maxsize=None)
def sr_run(variant, seed):
    return X.run_sr(variant, seed, cache())


@functools.lru_cache(maxsize=None)
def heldout():
    return X.sr_heldout()


@functools.lru_cache(maxsize=None)
def heldout_psnr(variant, seed):
    return X.evaluate_psnr(sr_run(variant, seed).model, heldout())


def criterion_1():
    start = time.perf_counter()
    reports = run_suite(0)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in reports if not r.passed]
    worst = max(max(r.max_rel_error.values()) for r in reports)
    ok = not failed and elapsed < 60
    return ok, f"{len(reports)} checks, failed={failed}, worst rel error {worst:.2e}, {elapsed:.1f} s (< 60 s)"


def criterion_2():
    rng = np.random.default_rng(2024)
    exact = 0
    for _ in range(100):
        groups = int(rng.integers(1, 3))
        n, c, o = int(rng.integers(1, 3)), 2 * groups * int(rng.integers(1, 3)), int(rng.integers(1, 5))
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        x = T.Tensor(rng.standard_normal((n, c, h, w)))
        wt = T.Tensor(rng.standard_normal((o, c, 3, 3)))
        b = T.Tensor(rng.standard_normal(o))
        conv = T.conv2d(x, wt, b, 1, 1).data
        dcn = deform_conv2d(x, T.Tensor(np.zeros((n, 18 * groups, h, w))), T.Tensor(np.ones((n, 9 * groups, h, w))),
                            wt, b, groups).data
        exact += int(np.array_equal(conv, dcn))
    return exact == 100, f"{exact}/100 random f64 cases bit-exact"


def criterion_3():
    m1, m3 = sr_run("model1", 0), sr_run("model3", 0)
    p1, p3 = heldout_psnr("model1", 0).mean(), heldout_psnr("model3", 0).mean()
    seconds = m1.seconds + m3.seconds
    ok = p3 - p1 >= 0.2 and seconds <= 1800
    return ok, (f"PCD {p3:.3f} dB vs single DCN {p1:.3f} dB: {p3 - p1:+.3f} dB (>= +0.2); "
                f"training {seconds / 60:.1f} min (<= 30)")


def criterion_4():
    model = sr_run("model4", 0).model
    clips = X.attention_clips()
    wins = 0
    for clip, _, _ in clips:
        att = X.mean_attention(model, clip)
        wins += int(att[1] > att[0])
    frac = wins / len(clips)
    return frac >= 0.8, f"static neighbour out-attends 8 px neighbour on {wins}/{len(clips)} clips ({frac:.0%}, >= 80%)"


def criterion_5():
    diffs = np.array([heldout_psnr("model4", s).mean() - heldout_psnr("model3", s).mean() for s in range(3)])
    med = float(np.median(diffs))
    ok = diffs.min() >= -0.05 and med >= 0.05
    per_seed = ", ".join(f"{d:+.3f}" for d in diffs)
    return ok, f"TSA minus concat per seed [{per_seed}] dB (each >= -0.05), median {med:+.3f} dB (>= +0.05)"


def criterion_6():
    x = np.random.default_rng(6).uniform(0, 1, (1, 3, 8, 8))
    char = [charbonnier_loss(T.Tensor(x), x, 1e-3, mode).data.item() for mode in ("per_element_mean", "global_norm")]
    char_ok = all(v == 1e-3 for v in char)
    p = psnr(np.zeros((3, 8, 8)), np.full((3, 8, 8), 16 / 255))
    psnr_ok = abs(p - 24.0498) <= 0.001
    a = np.random.default_rng(7).uniform(0, 1, (16, 16))
    ssim_ok = ssim(a, a) == 1.0
    black = rgb_to_y(np.zeros((3, 1, 1))).item()
    white = rgb_to_y(np.ones((3, 1, 1))).item()
    y_ok = abs(black - 16 / 255) <= 1e-9 and abs(white - (65.481 + 128.553 + 24.966 + 16) / 255) <= 1e-9
    detail = (f"charbonnier {char} {'ok' if char_ok else 'BAD'}; "
              f"psnr {p:.5f} vs pinned 24.0498 +- 0.001 {'ok' if psnr_ok else 'BAD'} "
              f"(analytic 20*log10(255/16) = {20 * math.log10(255 / 16):.5f}); "
              f"ssim(a,a) {'ok' if ssim_ok else 'BAD'}; luma endpoints {'ok' if y_ok else 'BAD'}")
    return char_ok and psnr_ok and ssim_ok and y_ok, detail


def criterion_7():
    s1, s2 = X.run_deblur(cache())
    one, two = X.deblur_eval(s1.model, s2.model, X.deblur_sequences(20, seed=X.HELDOUT_SEED + 2))
    return two.mean() >= one.mean(), f"stage 2 {two.mean():.3f} dB vs stage 1 {one.mean():.3f} dB ({two.mean() - one.mean():+.3f})"


def criterion_8():
    model = sr_run("model4", 0).model
    single = heldout_psnr("model4", 0).mean()
    ens = X.evaluate_psnr(model, heldout(), ensemble=True).mean()
    zero = EDVR(EdvrConfig(channels=8, extract_blocks=1, recon_blocks=1))
    for p in zero.parameters():
        p.data[...] = 0.0
    rng = np.random.default_rng(8)
    exact = all(np.array_equal(self_ensemble_infer(zero, c), restore_clip(zero, c))
                for c in rng.uniform(0, 1, (10, 5, 3, 16, 16)).astype(np.float32))
    ok = ens >= single - 0.05 and exact
    return ok, f"ensemble {ens:.3f} dB vs single {single:.3f} dB (>= -0.05); zero-trunk exact: {exact}"


def criterion_9():
    cfg = EdvrConfig(channels=8, extract_blocks=1, recon_blocks=1, seed=9)
    tcfg = TrainConfig(iters=10, batch=2, patch=32, seed=9)
    curves = [train(EDVR(cfg), tcfg)[0] for _ in range(2)]
    curves_ok = np.asarray(curves[0]).tobytes() == np.asarray(curves[1]).tobytes()
    with tempfile.TemporaryDirectory() as tmp:
        model = sr_run("model4", 0).model
        a, b = os.path.join(tmp, "a.ckpt"), os.path.join(tmp, "b.ckpt")
        io.save_checkpoint(a, model)
        fresh = EDVR(model.config)
        io.load_checkpoint(a, fresh)
        io.save_checkpoint(b, fresh)
        ckpt_ok = open(a, "rb").read() == open(b, "rb").read()
        degraded, _ = render_video("sr_clean", 100, 32, 32, seed=9)
        io.write_frames(os.path.join(tmp, "in"), degraded)
        save_model(os.path.join(tmp, "m.ckpt"), model)
        code = cli_main(["infer", "--ckpt", os.path.join(tmp, "m.ckpt"), "--frames", os.path.join(tmp, "in"),
                         "--out", os.path.join(tmp, "out")])
        n_out = len(os.listdir(os.path.join(tmp, "out")))
    ok = curves_ok and ckpt_ok and code == 0 and n_out == 100
    return ok, f"loss curves identical: {curves_ok}; checkpoint round trip identical: {ckpt_ok}; infer wrote {n_out}/100"


def criterion_10():
    run = sr_run("model4", 0)
    first, last = smoothed(run.losses)
    ours = heldout_psnr("model4", 0).mean()
    bic = X.bicubic_psnr(heldout()).mean()
    ok = last <= 0.5 * first and ours >= bic + 1.0
    return ok, (f"smoothed loss {first:.4f} -> {last:.4f} ({last / first:.0%}, <= 50%); "
                f"{ours:.3f} dB vs bicubic {bic:.3f} dB ({ours - bic:+.3f}, >= +1)")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8,
            criterion_9, criterion_10]


def report(i):
    ok, detail = CRITERIA[i - 1]()
    line = f"criterion {i}: {'PASS' if ok else 'FAIL'} {detail}"
    return ok, line


@pytest.mark.parametrize("i", range(1, 11))
def test_criterion(i, capsys):
    ok, line = report(i)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    for i in range(1, 11):
        print(report(i)[1], flush=True)
