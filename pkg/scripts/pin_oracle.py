"""One-time oracle run that pins the regression floors in src/drkit/data/pins.json.

    python3 scripts/pin_oracle.py

Crafts DR (mid tap), MI-FGSM, DIM and FGSM examples on the bundled MiniVGG
for a fixed 100-image held-out subset and records the measured drops. The
acceptance suite then requires later runs to stay within five points.
"""

import json
import time
from pathlib import Path

import numpy as np

from drkit.attacks import AttackConfig
from drkit.data import bundled_digits, fixed_subset, task_labels, train_test_split
from drkit.harness import transfer_eval
from drkit.models import load_bundled

OUT = Path(__file__).resolve().parents[1] / "src" / "drkit" / "data" / "pins.json"
SUBSET = {"split_seed": 2024, "n_test": 1000, "n": 100, "seed": 0}
SEED = 0


def main():
    _, test_ds = train_test_split(bundled_digits(), SUBSET["n_test"], SUBSET["split_seed"])
    ds = fixed_subset(test_ds, SUBSET["n"], SUBSET["seed"])
    vgg, resnet, parity = (load_bundled(n) for n in ("minivgg-digits", "miniresnet-digits", "minivgg-parity"))
    cfg = AttackConfig(seed=SEED)
    pins = {"seed": SEED, "subset": {**SUBSET, "digest": ds.digest()}}
    truth = task_labels(ds.labels, "digits")
    for attack in ("dr", "mi_fgsm", "dim", "fgsm"):
        t0 = time.time()
        report = transfer_eval(vgg, [vgg, resnet, parity], attack, cfg, ds)
        adv = report.adversarial
        prefix = attack
        pins[f"{prefix}_transfer_drop"] = round(report.row(attack, resnet.name).drop, 6)
        pins[f"{prefix}_cross_task_drop"] = round(report.row(attack, parity.name).drop, 6)
        pins[f"{prefix}_whitebox_drop"] = round(report.row(attack, vgg.name).drop, 6)
        if attack == "dr":
            pins["dr_fraction_halved"] = round(float(np.mean(adv.dispersion_ratio <= 0.5)), 6)
            pins["dr_clean_acc"] = round(float(np.mean(vgg.predict(ds.images) == truth)), 6)
            pins["dr_adv_acc"] = round(float(np.mean(vgg.predict(adv.images) == truth)), 6)
        if attack == "fgsm":
            pins["fgsm_flip_rate"] = round(float(np.mean(vgg.predict(adv.images) != vgg.predict(ds.images))), 6)
        print(attack, f"{time.time() - t0:.1f}s", report.to_csv(), flush=True)
    OUT.write_text(json.dumps(pins, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(pins, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
