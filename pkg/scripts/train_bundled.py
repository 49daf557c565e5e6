"""Train the three models shipped in src/drkit/data and print their held-out accuracy.

    python3 scripts/train_bundled.py [--only NAME]

Settings here are the pinned seed/accuracy pairs; rerunning reproduces the
committed weight files bit for bit on the same numpy/BLAS build.
"""

import argparse
import json
from pathlib import Path

from drkit.data import bundled_digits, train_test_split
from drkit.models import Model, save_weights, train

DATA = Path(__file__).resolve().parents[1] / "src" / "drkit" / "data"

RECIPES = {
    "minivgg-digits": dict(arch="minivgg", task="digits", epochs=3, lr=0.01, seed=7),
    "miniresnet-digits": dict(arch="miniresnet", task="digits", epochs=6, lr=0.01, seed=7),
    "minivgg-parity": dict(arch="minivgg", task="parity", epochs=3, lr=0.01, seed=8),
}


def build(name: str, recipe: dict):
    train_ds, test_ds = train_test_split(bundled_digits(), 1000)
    if recipe["task"] == "parity":
        train_ds, test_ds = train_ds.relabel("parity"), test_ds.relabel("parity")
    classes = 10 if recipe["task"] == "digits" else 2
    model = Model(recipe["arch"], num_classes=classes, seed=recipe["seed"], name=name, task=recipe["task"])
    summary = train(model, train_ds, recipe["epochs"], recipe["lr"], recipe["seed"], held_out=test_ds)
    return model, summary


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--only", choices=sorted(RECIPES))
    args = ap.parse_args()
    log = {}
    for name, recipe in RECIPES.items():
        if args.only and name != args.only:
            continue
        model, summary = build(name, recipe)
        save_weights(model, DATA / f"{name}.drw")
        log[name] = {**recipe, "test_accuracy": summary.test_accuracy, "checksum": model.checksum()}
        print(name, json.dumps(log[name]))


if __name__ == "__main__":
    main()
