"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``conftest.ACCEPTANCE_LINES`` and printed in the
terminal summary, so they show up with or without ``-s``.
"""

import json
import struct
import time
from pathlib import Path

import numpy as np
from conftest import ACCEPTANCE_LINES
from gradcases import CASES

from drkit import attacks as A
from drkit.attacks import AttackConfig
from drkit.autodiff import grad_check, std_dispersion
from drkit.cli import main
from drkit.data import IDXFormatError, bundled_digits, load_idx, write_idx
from drkit.models import Model, load_weights, save_weights, train

REPO = Path(__file__).resolve().parents[1]


def _report(number, title, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
    assert ok, detail


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    worst, failures, unverifiable, total = 0.0, [], 0, 0
    for name, build in CASES.items():
        for seed in range(100):
            fn, point = build(np.random.default_rng(seed))
            rep = grad_check(fn, point, eps=1e-3, tol=1e-3)
            verified = ~rep.unverifiable
            total += int(verified.sum())
            unverifiable += int(rep.unverifiable.sum())
            if verified.any():
                worst = max(worst, float(rep.rel_error[verified].max()))
            if not rep.passed:
                failures.append(f"{name}#{seed}")
    closed_worst = 0.0
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = rng.uniform(-2, 2, size=int(rng.integers(2, 50)))
        rep = grad_check(std_dispersion, t)
        closed_worst = max(closed_worst, float(np.abs(rep.analytic - A.closed_form_std_gradient(t)).max()))
    elapsed = time.perf_counter() - start
    ok = not failures and closed_worst < 1e-5 and elapsed < 60
    _report(
        1,
        "gradient correctness",
        ok,
        f"{len(CASES)} op cases x 100 inputs, {total} coordinates, max rel error {worst:.2e} (tol 1e-3), "
        f"{unverifiable} kink coordinates excluded, failures {failures[:5] or 'none'}; "
        f"std backward vs closed form max abs diff {closed_worst:.1e} (tol 1e-5); {elapsed:.1f}s (limit 60s)",
    )


def test_criterion_2_constraint_soundness(vgg, pinned_subset):
    matrix = [
        (attack, eps, iters)
        for attack in ("dr", "fgsm", "ifgsm", "mi_fgsm", "dim", "identity")
        for eps, iters in ((4.0, 3), (16.0, 5))
    ]
    x, y = pinned_subset.images[:50], pinned_subset.labels[:50]
    count, violations, worst = 0, 0, 0.0
    for attack, eps, iters in matrix:
        cfg = AttackConfig(epsilon=eps, iterations=iters, seed=1)
        adv = A.run_attack(attack, vgg, x, y, cfg, pinned_subset.indices[:50]).x_adv.data.astype(np.float64)
        dist = np.abs(adv - x).reshape(len(x), -1).max(axis=1)
        bad = (dist > eps / 255 + 1e-6) | (adv.reshape(len(x), -1).min(axis=1) < 0) | (adv.reshape(len(x), -1).max(axis=1) > 1)
        violations += int(bad.sum())
        worst = max(worst, float((dist - eps / 255).max()))
        count += len(x)
    ok = count >= 500 and violations == 0
    _report(2, "constraint soundness", ok, f"{count} AEs over {len(matrix)} configs, {violations} violations, worst excess {worst:.1e}")


def test_criterion_3_baseline_equivalence(vgg, pinned_subset):
    x, y = pinned_subset.images[:10], pinned_subset.labels[:10]
    idx = pinned_subset.indices[:10]
    cfg = AttackConfig(seed=0)
    same = lambda a, b: len(a.iterates) == len(b.iterates) and all(np.array_equal(p, q) for p, q in zip(a.iterates, b.iterates))
    checks = {
        "mi_fgsm(mu=0)==ifgsm": same(
            A.mi_fgsm(vgg, x, y, cfg.with_(momentum=0.0), idx, record_iterates=True),
            A.ifgsm(vgg, x, y, cfg, idx, record_iterates=True),
        ),
        "mi_fgsm(T=1)==fgsm": same(
            A.mi_fgsm(vgg, x, y, cfg.with_(iterations=1), idx, record_iterates=True),
            A.fgsm(vgg, x, y, cfg.epsilon, record_iterates=True),
        ),
        "dim(p=0)==mi_fgsm": same(
            A.dim(vgg, x, y, cfg.with_(transform_probability=0.0), idx, record_iterates=True),
            A.mi_fgsm(vgg, x, y, cfg, idx, record_iterates=True),
        ),
    }
    _report(3, "baseline equivalence", all(checks.values()), ", ".join(f"{k} {'bit-equal' if v else 'DIFFERS'}" for k, v in checks.items()) + " on 10 pinned images")


def test_criterion_4_dispersion_efficacy(vgg, pinned_dr, pinned_subset):
    adv = pinned_dr.adversarial
    halved = float(np.mean(adv.dispersion_ratio <= 0.5))
    clean = float(np.mean(vgg.predict(pinned_subset.images) == pinned_subset.labels))
    after = float(np.mean(vgg.predict(adv.images) == pinned_subset.labels))
    ok = halved >= 0.95 and clean >= 0.95 and after <= 0.40 and pinned_dr.elapsed < 600
    _report(
        4,
        "dispersion efficacy",
        ok,
        f"std reduced >=50% on {halved:.0%} of 100 images (need >=95%; median ratio {np.median(adv.dispersion_ratio):.3f}); "
        f"source accuracy {clean:.0%} clean (need >=95%) -> {after:.0%} adversarial (need <=40%); "
        f"DR crafting + scoring {pinned_dr.elapsed:.0f}s (limit 600s)",
    )


def test_criterion_5_transfer_regression(pinned_dr, pins, pinned_subset):
    digest_ok = pinned_subset.digest() == pins["subset"]["digest"]
    transfer = pinned_dr.row("dr", "miniresnet-digits").drop
    cross = pinned_dr.row("dr", "minivgg-parity").drop
    floors = pins["dr_transfer_drop"] - 0.05, pins["dr_cross_task_drop"] - 0.05
    ok = digest_ok and transfer >= floors[0] and cross >= floors[1]
    _report(
        5,
        "transfer regression",
        ok,
        f"subset {pins['subset']['digest']} {'matches' if digest_ok else 'DIFFERS'}; "
        f"MiniResNet drop {transfer:.3f} vs floor {floors[0]:.3f} (pinned {pins['dr_transfer_drop']:.3f}); "
        f"parity drop {cross:.3f} vs floor {floors[1]:.3f} (pinned {pins['dr_cross_task_drop']:.3f}); "
        "floors are below zero because the pinned drops are under 5 points",
    )


def test_criterion_6_profile_reproducible(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["profile", "--out", str(o)]) for o in outs]
    files = ("profile.csv", "profile.json")
    identical = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files) if codes == [0, 0] else False
    rows = (outs[0] / "profile.csv").read_text().splitlines()[1:] if codes[0] == 0 else []
    taps = sorted({r.split(",")[2] for r in rows})
    findings = json.loads((outs[0] / "profile.json").read_text())["findings"] if codes[0] == 0 else []
    complete = taps == ["conv1.2", "conv3.3", "fc1.relu"] and len(rows) == 9
    ok = codes == [0, 0] and identical and complete and len(findings) == 3
    _report(
        6,
        "profiling reproducibility",
        ok,
        f"exit codes {codes}, {len(rows)} rows over taps {taps}, byte-identical {identical}; findings: {' | '.join(findings)}",
    )


def test_criterion_7_demo_deterministic(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["demo", "--out", str(o)]) for o in outs]
    names = sorted(p.name for p in outs[0].iterdir()) if codes[0] == 0 else []
    kinds = {Path(n).suffix for n in names}
    identical = bool(names) and all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    committed = REPO / "reports" / "demo"
    matches = committed.is_dir() and all(
        (committed / n).exists() and (committed / n).read_bytes() == (outs[0] / n).read_bytes() for n in names
    )
    ok = codes == [0, 0] and identical and {".csv", ".json", ".ppm"} <= kinds
    _report(
        7,
        "demo determinism",
        ok,
        f"exit codes {codes}, {len(names)} files ({', '.join(sorted(kinds))}) byte-identical {identical}; "
        f"matches committed reports/demo: {matches}",
    )


def test_criterion_8_format_round_trips(tmp_path):
    ds = bundled_digits().take(np.arange(0, 5000, 250))
    m = Model("minivgg", seed=1)
    train(m, ds, 1, 0.01, seed=0, batch_size=4)
    save_weights(m, tmp_path / "m.drw")
    back = load_weights(tmp_path / "m.drw")
    weights_ok = all(np.array_equal(p.data, q.data) and p.data.dtype == q.data.dtype for p, q in zip(m.parameters(), back.parameters()))

    ip, lp = tmp_path / "x.idx3", tmp_path / "y.idx1"
    write_idx(ds, ip, lp)
    idx_ok = np.array_equal(load_idx(ip, lp).images, ds.images)
    good_images, good_labels = ip.read_bytes(), lp.read_bytes()
    cases = {
        "bad magic": (b"\x00\x00\x09\x03" + good_images[4:], good_labels, 0),
        "truncated": (good_images[:-10], good_labels, len(good_images) - 10),
        "count mismatch": (good_images, struct.pack(">II", 0x801, len(ds) - 1) + good_labels[8:-1], 4),
    }
    rejected = {}
    for label, (ib, lb, offset) in cases.items():
        ip.write_bytes(ib)
        lp.write_bytes(lb)
        try:
            load_idx(ip, lp)
            rejected[label] = False
        except IDXFormatError as exc:
            rejected[label] = exc.offset == offset
    ok = weights_ok and idx_ok and all(rejected.values())
    _report(
        8,
        "format round-trips",
        ok,
        f"weights bit-identical {weights_ok}; IDX round-trip {idx_ok}; "
        + ", ".join(f"{k} rejected with offset {'ok' if v else 'WRONG'}" for k, v in rejected.items()),
    )
