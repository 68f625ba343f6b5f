"""Acceptance gate: nine end-to-end criteria, one printed line each.

The desk-scale experiment (criteria 6-9) drives the real CLI on a generated
dataset; the run artifacts are shared across those criteria so the expensive
training happens once (plus the duplicate run determinism needs).
"""

import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import oracles
from segreg.cli import main as cli_main
from segreg.datasets import DataConfig, derive_rng, generate_synthetic
from segreg.losses import gncc, smoothness_penalty, soft_dice_loss
from segreg.metrics import dsc, hausdorff, wilcoxon_signed_rank
from segreg.models import build_reg_model, reg_forward
from segreg.trainer import ExperimentConfig, _train_reg_epochs, audit_split_hygiene
from segreg.warp import (BORDER_CLAMP, BORDER_ZEROS, apply_augment, invert_augment,
                         sample_augment, warp)


def _report(capsys, num: int, name: str, ok: bool, detail: str,
            elapsed: float, budget: float) -> None:
    with capsys.disabled():
        print(f"\n[criterion {num}] {name}: {'PASS' if ok and elapsed < budget else 'FAIL'}"
              f" ({detail}; {elapsed:.1f}s of {budget:.0f}s budget)")
    assert ok, f"criterion {num} ({name}): {detail}"
    assert elapsed < budget, f"criterion {num} ({name}) exceeded {budget}s: {elapsed:.1f}s"


def _t64(a):
    return torch.tensor(np.asarray(a), dtype=torch.float64)


def test_criterion_1_loss_oracles(capsys):
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        p = rng.uniform(0, 1, (8, 8))
        q = rng.uniform(0, 1, (8, 8))
        f = rng.uniform(-2, 2, (2, 8, 8))
        worst = max(worst, abs(soft_dice_loss(_t64(p), _t64(q)).item()
                               - oracles.dice_loss_ref(p, q)))
        worst = max(worst, abs(gncc(_t64(p), _t64(q)).item() - oracles.gncc_ref(p, q)))
        worst = max(worst, abs(smoothness_penalty(_t64(f)).item()
                               - oracles.smoothness_ref(f)))
    _report(capsys, 1, "loss oracles", worst < 1e-6, f"max |diff| = {worst:.2e}",
            time.time() - t0, 10)


def test_criterion_2_gradient_checks(capsys):
    t0 = time.time()
    rng = np.random.default_rng(21)
    ok = True
    p = torch.tensor(rng.uniform(0.1, 0.9, (8, 8)), dtype=torch.float64, requires_grad=True)
    q = torch.tensor(rng.uniform(0.1, 0.9, (8, 8)), dtype=torch.float64)
    ok &= torch.autograd.gradcheck(lambda x: soft_dice_loss(x, q), (p,),
                                   eps=1e-6, atol=1e-4, rtol=1e-4)
    ok &= torch.autograd.gradcheck(lambda x: gncc(x, q), (p,),
                                   eps=1e-6, atol=1e-4, rtol=1e-4)
    f = torch.tensor(rng.uniform(-1, 1, (2, 8, 8)), dtype=torch.float64, requires_grad=True)
    ok &= torch.autograd.gradcheck(smoothness_penalty, (f,), eps=1e-6, atol=1e-4, rtol=1e-4)
    img = torch.tensor(rng.uniform(0, 1, (8, 8)), dtype=torch.float64)
    # keep sample points off the bilinear kinks at integer offsets
    g = torch.tensor(rng.uniform(-1.5, 1.5, (2, 8, 8)) + 0.3, dtype=torch.float64,
                     requires_grad=True)
    ok &= torch.autograd.gradcheck(lambda d: warp(img, d, BORDER_CLAMP).sum(), (g,),
                                   eps=1e-6, atol=1e-4, rtol=1e-4)
    _report(capsys, 2, "gradient checks", bool(ok), "dice/gncc/smoothness/warp-field",
            time.time() - t0, 60)


def test_criterion_3_warp_invariants(capsys):
    t0 = time.time()
    rng = np.random.default_rng(31)
    img = torch.tensor(rng.uniform(0, 1, (32, 32)), dtype=torch.float32)
    zero = torch.zeros(2, 32, 32)
    identity_ok = (torch.equal(warp(img, zero, BORDER_CLAMP), img)
                   and torch.equal(warp(img, zero, BORDER_ZEROS), img))

    shift = torch.zeros(2, 32, 32)
    shift[0] += 3.0
    shift[1] -= 2.0
    shifted = warp(img, shift, BORDER_CLAMP)
    shift_ok = torch.equal(shifted[:-3, 2:], img[3:, :-2])

    yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    blob = np.exp(-(((yy - 14.0) / 6) ** 2 + ((xx - 18.0) / 7) ** 2))
    blob_t = torch.tensor(blob, dtype=torch.float32)
    maes = []
    for k in range(20):
        a = sample_augment(derive_rng(31, "tta", k))
        round_trip = invert_augment(apply_augment(blob_t, a, kind="mask"), a)
        maes.append(float((round_trip - blob_t).abs().mean()))
    tta_ok = max(maes) < 0.02
    ok = identity_ok and shift_ok and tta_ok
    _report(capsys, 3, "warp invariants", ok,
            f"identity={identity_ok} shift={shift_ok} tta max MAE={max(maes):.4f}",
            time.time() - t0, 30)


def test_criterion_4_metric_oracles(capsys):
    t0 = time.time()
    rng = np.random.default_rng(41)
    hd_ok = True
    for _ in range(100):
        a = rng.uniform(size=(16, 16)) < 0.3
        b = rng.uniform(size=(16, 16)) < 0.3
        if not a.any() or not b.any():
            continue
        hd_ok &= abs(hausdorff(a, b) - oracles.hausdorff_ref(a, b)) < 1e-9

    full = np.ones((4, 4), dtype=bool)
    half = np.zeros((4, 4), dtype=bool)
    half[:2] = True
    dsc_ok = (dsc(full, full) == 1.0
              and dsc(half, ~half) == 0.0
              and abs(dsc(full, half) - 2 * 8 / (16 + 8)) < 1e-12
              and dsc(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0)

    a6 = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    b6 = a6 - np.array([0.11, 0.23, 0.34, 0.45, 0.56, 0.67])
    p = wilcoxon_signed_rank(a6, b6, method="exact")
    wil_ok = abs(p - 0.03125) < 1e-12
    ok = hd_ok and dsc_ok and wil_ok
    _report(capsys, 4, "metric oracles", ok,
            f"hausdorff={hd_ok} dsc={dsc_ok} wilcoxon p={p:.5f}",
            time.time() - t0, 60)


def test_criterion_5_known_translation_registration(capsys):
    t0 = time.time()
    size = 64
    samples = generate_synthetic(DataConfig(count=80, image_size=size), seed=101)
    rng = np.random.default_rng(51)
    pairs = []
    for s in samples:
        while True:
            t = rng.integers(-6, 7, size=2)
            if np.hypot(*t) <= 6.0:
                break
        field = torch.zeros(2, size, size)
        field[0] += float(-t[0])
        field[1] += float(-t[1])
        moved = warp(s.image, field, BORDER_CLAMP)
        pairs.append((s.image, moved, t.astype(np.float64)))
    train_pairs, eval_pairs = pairs[:40], pairs[40:]

    cfg = ExperimentConfig.desk_scale(seed=51)
    model = build_reg_model(510, size, cfg.k_levels, cfg.base_width)

    def sampler(prng):
        src, tgt, _ = train_pairs[int(prng.integers(len(train_pairs)))]
        return ("a", "b", src, tgt, None, None)

    _train_reg_epochs(model, sampler, n_pairs=40, epochs=150, lr=cfg.reg_lr_initial,
                      cfg=cfg, logger=None, phase="accept-reg", iteration=0)

    errors, improved = [], []
    with torch.no_grad():
        for src, tgt, t in eval_pairs:
            fields = reg_forward(model, src, tgt)
            inner = fields[-1][:, 10:-10, 10:-10]
            recovered = -np.array([float(inner[0].mean()), float(inner[1].mean())])
            errors.append(float(np.linalg.norm(recovered - t)))
            warped = warp(src, fields[-1], BORDER_CLAMP)
            improved.append(gncc(warped, tgt).item() < gncc(src, tgt).item())
    median_err = float(np.median(errors))
    frac = float(np.mean(improved))
    ok = median_err <= 1.0 and frac >= 0.8
    _report(capsys, 5, "known-translation registration", ok,
            f"median |err| = {median_err:.2f}px, gncc improved on {frac:.0%} held-out",
            time.time() - t0, 3600)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Dataset + trained fs/mt/joint runs (joint twice) via the real CLI."""
    root = tmp_path_factory.mktemp("desk")
    data = root / "data"
    timings = {}
    t = time.time()
    assert cli_main(["gen-data", "--out", str(data), "--count", "250",
                     "--size", "64", "--seed", "0"]) == 0
    timings["data"] = time.time() - t

    runs = {}
    for method in ("fs", "mt", "joint"):
        t = time.time()
        assert cli_main(["train", "--data", str(data), "--method", method,
                         "--out", str(root / "runs")]) == 0
        run = root / "runs" / f"{method}_0.01_0"
        assert cli_main(["eval", "--run", str(run), "--data", str(data)]) == 0
        timings[method] = time.time() - t
        runs[method] = run

    t = time.time()
    assert cli_main(["train", "--data", str(data), "--method", "joint",
                     "--out", str(root / "runs-repeat")]) == 0
    repeat = root / "runs-repeat" / "joint_0.01_0"
    assert cli_main(["eval", "--run", str(repeat), "--data", str(data)]) == 0
    timings["joint-repeat"] = time.time() - t
    return {"data": data, "runs": runs, "repeat": repeat, "timings": timings}


def _mean_dsc(run: Path, method: str) -> float:
    with open(run / "metrics.csv", newline="") as fh:
        vals = [float(r["dsc"]) for r in csv.DictReader(fh) if r["method"] == method]
    assert vals, f"no rows for {method} in {run}"
    return float(np.mean(vals))


def test_criterion_6_table_ordering(desk_runs, capsys):
    tm = desk_runs["timings"]
    elapsed = tm["data"] + tm["fs"] + tm["mt"] + tm["joint"]
    fs = _mean_dsc(desk_runs["runs"]["fs"], "fs")
    mt = _mean_dsc(desk_runs["runs"]["mt"], "mt")
    joint = _mean_dsc(desk_runs["runs"]["joint"], "joint")
    comb = _mean_dsc(desk_runs["runs"]["joint"], "combined")
    ok = (comb >= joint - 0.02) and (joint >= fs + 0.05) and (joint >= mt)
    _report(capsys, 6, "directional table ordering", ok,
            f"fs={fs:.3f} mt={mt:.3f} joint={joint:.3f} combined={comb:.3f}",
            elapsed, 2700)


def test_criterion_7_pseudo_mask_improvement(desk_runs, capsys):
    history = json.loads((desk_runs["runs"]["joint"] / "history.json").read_text())
    audits = [h["pseudo_audit_dsc"] for h in history if h["iteration"] >= 1]
    gain = audits[-1] - audits[0]
    _report(capsys, 7, "pseudo-mask improvement", gain >= 0.05,
            f"hidden-GT DSC {audits[0]:.3f} -> {audits[-1]:.3f} (gain {gain:+.3f})",
            0.0, 1.0)


def test_criterion_8_identical_seed_determinism(desk_runs, capsys):
    first = (desk_runs["runs"]["joint"] / "metrics.csv").read_bytes()
    second = (desk_runs["repeat"] / "metrics.csv").read_bytes()
    _report(capsys, 8, "identical-seed determinism", first == second,
            "metric CSVs byte-identical" if first == second else "CSVs differ",
            desk_runs["timings"]["joint-repeat"], 2700)


def test_criterion_9_split_hygiene(desk_runs, capsys):
    t0 = time.time()
    leaks = {}
    for method, run in desk_runs["runs"].items():
        test_ids = json.loads((run / "split.json").read_text())["test"]
        leaked = audit_split_hygiene(run / "training_log.csv", test_ids)
        if leaked:
            leaks[method] = leaked
    _report(capsys, 9, "split hygiene", not leaks,
            "no test ids in any training batch" if not leaks else f"leaked: {leaks}",
            time.time() - t0, 60)
