"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete. Criteria 7 and 8 are desk-scale training runs and
dominate the runtime (roughly 10 and 35 minutes on two CPU cores).
"""

import numpy as np
import pytest

import flcnn.model as M
import flcnn.tensor as T
from flcnn.cli import run
from flcnn.evaluate import evaluate_dataset, psnr, ssim
from flcnn.imageio import GrayImage, read_pgm, write_pgm
from flcnn.train import TrainConfig, add_awgn, gradient_check, train

from conftest import (conv2d_direct, finite_difference, make_pgm_dir,
                      max_rel_err, synthetic_bytes, synthetic_image)


def _report(num, desc, ok, detail=""):
    suffix = f"  [{detail}]" if detail else ""
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {desc}{suffix}")
    assert ok, f"criterion {num} failed: {desc} {suffix}"


def test_criterion_01_exact_parameter_counts():
    flash = M.count_params(M.build_flashlight(M.ArchConfig(5, 4, 6)))[0]
    dncnn = M.count_params(M.build_dncnn_like(15))[0]
    _report(1, "exact parameter counts",
            flash == 1_627_905 and dncnn == 557_057,
            f"flashlight(5,4,6)={flash}, dncnn_like(15)={dncnn}")


def test_criterion_02_grid_reproduction():
    rows = M.enumerate_architectures([5], [3, 4, 5], [3, 4, 5, 6, 7])
    counts = [r[3] for r in rows]
    ok = (len(rows) == 15 and counts == sorted(counts)
          and counts[0] == 1_009_793 and counts[-1] == 1_902_337)
    _report(2, "architecture grid reproduction", ok,
            f"{len(rows)} configs, min={counts[0]}, max={counts[-1]}")


def test_criterion_03_gradient_correctness():
    err = gradient_check(M.ArchConfig(1, 1, 1), (10, 10), eps=1e-4,
                         dtype="f64", n_samples=200, seed=0)
    _report(3, "whole-model gradient check (f64, 200 samples)", err < 1e-5,
            f"max rel err {err:.3e} < 1e-5")


def test_criterion_04_primitive_oracles(rng):
    # forward conv against the quadruple-loop oracle (f32)
    x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = T.conv2d_forward(x, T.ConvParams(w, b))
    direct = conv2d_direct(x, w, b)
    fwd_err = float(np.max(np.abs(out - direct)) / np.max(np.abs(direct)))

    # backward passes against f64 central differences on <= 8x8 inputs
    errs = []
    xc = rng.standard_normal((1, 2, 6, 6))
    wc = rng.standard_normal((3, 2, 3, 3))
    bc = rng.standard_normal(3)
    pc = T.ConvParams(wc, bc)

    def conv_loss():
        o = T.conv2d_forward(xc, pc)
        return 0.5 * float(np.sum(o * o))

    o = T.conv2d_forward(xc, pc)
    gin, gw, gb = T.conv2d_backward(o.copy(), xc, pc)
    errs.append(max_rel_err(gin, finite_difference(conv_loss, xc)))
    errs.append(max_rel_err(gw, finite_difference(conv_loss, wc)))
    errs.append(max_rel_err(gb, finite_difference(conv_loss, bc)))

    xb = rng.standard_normal((2, 3, 4, 4))
    gamma = rng.random(3) + 0.5
    beta = rng.standard_normal(3)
    cot = rng.standard_normal(xb.shape)

    def bn_loss():
        outb, _ = T.batchnorm_forward(xb, T.BnParams(gamma, beta), "train")
        return float(np.sum(outb * cot))

    _, cache = T.batchnorm_forward(xb, T.BnParams(gamma, beta), "train")
    ginb, gg, gbeta = T.batchnorm_backward(cot, cache)
    errs.append(max_rel_err(ginb, finite_difference(bn_loss, xb)))
    errs.append(max_rel_err(gg, finite_difference(bn_loss, gamma)))
    errs.append(max_rel_err(gbeta, finite_difference(bn_loss, beta)))

    xr = rng.standard_normal((1, 2, 5, 5))
    cot_r = rng.standard_normal(xr.shape)

    def relu_loss():
        return float(np.sum(T.relu_forward(xr) * cot_r))

    errs.append(max_rel_err(T.relu_backward(cot_r, xr),
                            finite_difference(relu_loss, xr)))

    bwd_err = max(errs)
    _report(4, "primitive forward/backward oracles",
            fwd_err < 1e-5 and bwd_err < 1e-6,
            f"conv fwd {fwd_err:.2e} < 1e-5, backward {bwd_err:.2e} < 1e-6")


def test_criterion_05_residual_identity(tmp_path, rng):
    g = M.build_flashlight(M.ArchConfig(1, 1, 1), seed=2)
    g.params["last.conv.weight"][:] = 0
    g.params["last.conv.bias"][:] = 0
    model_path = tmp_path / "identity.flcn"
    M.save_checkpoint(g, model_path)
    ok = True
    for i in range(5):
        pixels = synthetic_bytes(rng, 40 + i, 37 + 2 * i)
        src = tmp_path / f"in_{i}.pgm"
        dst = tmp_path / f"out_{i}.pgm"
        write_pgm(GrayImage(pixels.shape[1], pixels.shape[0], pixels), src)
        code = run(["denoise", "--model", str(model_path),
                    "--input", str(src), "--output", str(dst)])
        ok = ok and code == 0 and dst.read_bytes() == src.read_bytes()
    _report(5, "zeroed residual path denoises to bit-identical output", ok,
            "5 PGMs round-tripped")


def test_criterion_06_metric_fixtures(rng):
    ref = rng.integers(1, 255, (64, 64)).astype(np.float64)
    p1 = psnr(ref, ref - 1.0)
    ok1 = abs(p1 - 48.1308) < 1e-3

    img = synthetic_bytes(rng, 48, 48).astype(np.float64)
    ok2 = ssim(img, img.copy()) == 1.0

    clean = synthetic_bytes(rng, 256, 256, lo=0.12, hi=0.88).astype(np.float64)
    noisy = add_awgn(clean[None, None] / 255.0, 25.0,
                     np.random.default_rng(3))[0, 0] * 255.0
    p3 = psnr(clean, noisy)
    ok3 = 20.0 <= p3 <= 20.4

    _report(6, "metric fixtures", ok1 and ok2 and ok3,
            f"uniform-1 {p1:.4f} dB, ssim(a,a)=1, awgn {p3:.3f} dB")


def test_criterion_07_overfit_smoke():
    rng = np.random.default_rng(777)
    patches = [synthetic_image(rng, 64, 64) for _ in range(4)]
    cfg = TrainConfig(arch=M.ArchConfig(1, 1, 1), sigma=25.0, epochs=500,
                      epoch_length=1, batch_size=4, patch_size=64,
                      lr_initial=1e-3, lr_drop_epoch=500, lr_after=1e-3,
                      seed=99, dtype="f32")
    _, log = train(cfg, patches)
    losses = np.array([r.mean_loss for r in log.rows])
    initial = losses[0]
    final = float(losses[-10:].mean())
    ok_ratio = final < 0.01 * initial

    # smoothed training curve is non-increasing up to plateau noise
    windows = losses.reshape(10, 50).mean(axis=1)
    ok_monotone = bool(np.all(windows[1:] <= windows[:-1] * 1.05))

    _report(7, "overfit smoke test (500 steps, 4 patches)",
            ok_ratio and ok_monotone,
            f"initial {initial:.4f} -> final {final:.6f} "
            f"({100 * final / initial:.3f}% of initial), "
            f"smoothed windows non-increasing={ok_monotone}")


def test_criterion_08_desk_scale_denoising_gain():
    rng = np.random.default_rng(2024)
    train_corpus = [synthetic_image(rng, 128, 128) for _ in range(24)]
    held_out = [synthetic_image(rng, 128, 128) for _ in range(6)]
    cfg = TrainConfig(arch=M.ArchConfig(2, 1, 1), sigma=25.0, epochs=4,
                      epoch_length=500, batch_size=6, patch_size=48,
                      lr_initial=1e-3, lr_drop_epoch=30, seed=7, dtype="f32")
    model, _ = train(cfg, train_corpus)

    gains = []
    noise_rng = np.random.default_rng(13)
    for img in held_out:
        ref = img * 255.0
        z = add_awgn(img[None, None].astype(np.float32), 25.0, noise_rng)
        yhat, _ = M.forward(model, z, "infer")
        noisy_psnr = psnr(ref, np.clip(z[0, 0].astype(np.float64) * 255, 0, 255))
        den_psnr = psnr(ref, np.clip(yhat[0, 0].astype(np.float64) * 255, 0, 255))
        gains.append(den_psnr - noisy_psnr)
    mean_gain = float(np.mean(gains))
    _report(8, "desk-scale denoising gain (2000 steps, held-out corpus)",
            mean_gain >= 1.0, f"mean PSNR gain {mean_gain:.2f} dB >= 1.0 dB")


def test_criterion_09_determinism(tmp_path):
    # eval: full CSV must be byte-identical across runs at 1 thread
    g = M.build_flashlight(M.ArchConfig(1, 0, 0), seed=5)
    model_path = tmp_path / "m.flcn"
    M.save_checkpoint(g, model_path)
    make_pgm_dir(tmp_path / "set", 3, 48, 48, seed=21)
    reports = []
    for name in ("r1.csv", "r2.csv"):
        assert run(["eval", "--model", str(model_path), "--dataset",
                    str(tmp_path / "set"), "--name", "tiny", "--sigma", "25",
                    "--seed", "7", "--threads", "1",
                    "--report", str(tmp_path / name)]) == 0
        reports.append((tmp_path / name).read_bytes())
    ok_eval = reports[0] == reports[1]

    # train: loss/lr/val columns and the final checkpoint must match;
    # the wall_seconds column is wall-clock and is excluded
    make_pgm_dir(tmp_path / "data", 2, 24, 24, seed=22)
    logs, ckpts = [], []
    for out in ("runA", "runB"):
        assert run(["train", "--data", str(tmp_path / "data"), "--sigma", "25",
                    "--arch", "1,0,0", "--epochs", "2", "--epoch-length", "3",
                    "--batch-size", "2", "--patch", "16", "--seed", "9",
                    "--threads", "1", "--out", str(tmp_path / out)]) == 0
        lines = (tmp_path / out / "log.csv").read_text().splitlines()
        logs.append([",".join(line.split(",")[:4]) for line in lines])
        ckpts.append((tmp_path / out / "model.flcn").read_bytes())
    ok_train = logs[0] == logs[1] and ckpts[0] == ckpts[1]

    _report(9, "eval and train are bit-deterministic at 1 thread",
            ok_eval and ok_train,
            f"eval csv identical={ok_eval}, train log+checkpoint identical={ok_train}")


def test_criterion_10_checkpoint_roundtrip(tmp_path, rng):
    g = M.build_flashlight(M.ArchConfig(1, 1, 0), seed=8)
    g.sigma = 25.0
    z = rng.random((1, 1, 20, 20), dtype=np.float32)
    M.forward(g, z, "train")  # perturb running stats away from init
    before, _ = M.forward(g, z, "infer")
    path = tmp_path / "m.flcn"
    M.save_checkpoint(g, path)
    loaded = M.load_checkpoint(path)
    after, _ = M.forward(loaded, z, "infer")
    ok_roundtrip = np.array_equal(before, after) and loaded.sigma == 25.0

    blob = path.read_bytes()
    bad_magic = tmp_path / "bad_magic.flcn"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    try:
        M.load_checkpoint(bad_magic)
        ok_magic = False
    except M.BadMagicError:
        ok_magic = True
    except M.CheckpointError:
        ok_magic = False

    truncated = tmp_path / "truncated.flcn"
    truncated.write_bytes(blob[:-64])
    try:
        M.load_checkpoint(truncated)
        ok_trunc = False
    except M.TruncatedPayloadError:
        ok_trunc = True
    except M.CheckpointError:
        ok_trunc = False

    _report(10, "checkpoint round-trip and distinct error kinds",
            ok_roundtrip and ok_magic and ok_trunc,
            f"roundtrip={ok_roundtrip}, bad_magic={ok_magic}, truncated={ok_trunc}")
