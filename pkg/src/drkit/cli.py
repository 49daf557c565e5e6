"""Command-line entry point: ``drkit {train,attack,eval,profile,demo}``.

Configuration is a flat JSON object whose keys are exactly the long flags
(``--epsilon`` <-> ``"epsilon"``). Flags override file values; the resolved
configuration is echoed into each run's ``manifest.json``.

Exit codes: 0 success, 2 configuration or input error, 3 invariant breach.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .attacks import ATTACK_NAMES, AttackConfig, BudgetViolation, run_attack
from .autodiff import NonFiniteError
from .data import (
    IDXFormatError,
    LabeledDataset,
    bundled_digits,
    fixed_subset,
    load_idx,
    task_labels,
    train_test_split,
    write_panel,
)
from .harness import EvalReport, atomic_write_text, cross_task_findings, generate, layer_profile, transfer_eval
from .models import (
    ARCHITECTURES,
    TAP_GROUPS,
    Model,
    TrainingDiverged,
    WeightsFormatError,
    bundled_weights_path,
    load_bundled,
    load_weights,
    save_weights,
    train,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
SUBCOMMANDS = ("train", "attack", "eval", "profile", "demo")
SPLIT_SEED = 2024

PUBLISHED = "published attack setting"
TOOLKIT = ""


class ConfigError(ValueError):
    """Bad configuration; the message names the offending key."""


@dataclass(frozen=True)
class Key:
    types: tuple
    default: Any
    help: str
    origin: str = TOOLKIT
    nullable: bool = False


_STR, _INT, _NUM, _LIST = (str,), (int,), (int, float), (list,)

KEYS: Dict[str, Key] = {
    # data
    "images": Key(_STR, None, "IDX image file (bundled 5000-digit set when unset)", nullable=True),
    "labels": Key(_STR, None, "IDX label file, paired with --images", nullable=True),
    "split": Key(_STR, "test", "which split to attack: train, test or all"),
    "n_test": Key(_INT, 1000, "held-out split size"),
    "n": Key(_INT, 100, "images drawn from the split for attack, eval and profile"),
    "subset_seed": Key(_INT, 0, "seed of the subset draw"),
    # models
    "arch": Key(_STR, "minivgg", "architecture to train: " + ", ".join(ARCHITECTURES)),
    "weights": Key(_STR, None, "source weights file (train: output path; others: bundled minivgg-digits)", nullable=True),
    "targets": Key(_LIST, None, "target weights files, comma separated (bundled models when unset)", nullable=True),
    "task": Key(_STR, "digits", "label function for train: digits or parity"),
    "epochs": Key(_INT, 3, "training epochs"),
    "train_lr": Key(_NUM, 0.01, "SGD learning rate for train"),
    "batch_size": Key(_INT, 1, "SGD minibatch size for train"),
    # attack
    "attack": Key(_STR, "dr", "attack name: " + ", ".join(ATTACK_NAMES)),
    "epsilon": Key(_NUM, 16.0, "L-inf budget in 0-255 pixel units", PUBLISHED),
    "iters": Key(_INT, None, "iterations (dr 100, mi_fgsm/dim/ifgsm 20, fgsm 1)", PUBLISHED, nullable=True),
    "lr": Key(_NUM, 0.05, "Adam learning rate of dr", PUBLISHED),
    "beta1": Key(_NUM, 0.98, "Adam first-moment decay of dr", PUBLISHED),
    "beta2": Key(_NUM, 0.99, "Adam second-moment decay of dr", PUBLISHED),
    "mu": Key(_NUM, 1.0, "momentum decay of mi_fgsm and dim", PUBLISHED),
    "alpha": Key(_NUM, None, "FGSM-family step in 0-255 units (epsilon / iters when unset)", nullable=True),
    "p": Key(_NUM, 0.5, "input-diversity probability of dim", PUBLISHED),
    "tap": Key(_STR, None, "dr tap layer (source's mid layer when unset)", nullable=True),
    "taps": Key(_LIST, None, "profile taps, comma separated (shallow, mid and deep when unset)", nullable=True),
    "index": Key(_INT, None, "attack one image at this split position instead of a subset", nullable=True),
    "seed": Key(_INT, 0, "attack seed (train: init and shuffle seed)"),
    # output
    "out": Key(_STR, "drkit-out", "output directory"),
}

_DATA = ("images", "labels", "split", "n_test")
_ATTACK = ("attack", "epsilon", "iters", "lr", "beta1", "beta2", "mu", "alpha", "p", "tap", "seed")
SUBCOMMAND_KEYS = {
    "train": _DATA + ("arch", "task", "epochs", "train_lr", "batch_size", "seed", "weights", "out"),
    "attack": _DATA + ("n", "subset_seed", "weights", "index", "out") + _ATTACK,
    "eval": _DATA + ("n", "subset_seed", "weights", "targets", "out") + _ATTACK,
    "profile": _DATA + ("n", "subset_seed", "weights", "targets", "taps", "out")
    + tuple(k for k in _ATTACK if k not in ("attack", "tap", "mu", "alpha", "p")),
    "demo": ("out",),
}
_RANGES = {
    "n_test": (1, None),
    "n": (1, None),
    "epochs": (0, None),
    "batch_size": (1, None),
    "epsilon": (0, 255),
    "iters": (1, None),
    "index": (0, None),
}
_POSITIVE = ("train_lr", "lr", "alpha")
_UNIT_OPEN = ("beta1", "beta2")


@dataclass
class RunConfig:
    subcommand: str
    values: Dict[str, Any] = field(default_factory=dict)
    sources: Dict[str, str] = field(default_factory=dict)

    def __getattr__(self, key: str):
        values = self.__dict__.get("values", {})
        if key in values:
            return values[key]
        raise AttributeError(key)

    def attack_config(self) -> AttackConfig:
        v = self.values
        return AttackConfig(
            epsilon=float(v.get("epsilon", 16.0)),
            iterations=v.get("iters"),
            learning_rate=float(v.get("lr", 0.05)),
            momentum=float(v.get("mu", 1.0)),
            step=None if v.get("alpha") is None else float(v["alpha"]),
            transform_probability=float(v.get("p", 0.5)),
            tap_layer=v.get("tap"),
            adam_beta1=float(v.get("beta1", 0.98)),
            adam_beta2=float(v.get("beta2", 0.99)),
            seed=int(v.get("seed", 0)),
        )

    def echo(self) -> Dict[str, Any]:
        """Resolved values without the output location, for reports."""
        return {k: v for k, v in sorted(self.values.items()) if k != "out"}


def _check_type(key: str, value: Any) -> Any:
    entry = KEYS[key]
    if value is None and entry.nullable:
        return None
    expected = " or ".join(t.__name__ for t in entry.types) + (" or null" if entry.nullable else "")
    if isinstance(value, bool) or not isinstance(value, entry.types):
        raise ConfigError(f"key {key!r}: expected {expected}, got {type(value).__name__} {value!r}")
    if entry.types is _LIST:
        if not all(isinstance(item, str) for item in value):
            raise ConfigError(f"key {key!r}: expected a list of strings")
        value = list(value)
    if entry.types is _NUM:
        value = float(value)
    return value


def _unknown(key: str, valid: Sequence[str], where: str) -> ConfigError:
    close = difflib.get_close_matches(key, list(valid), n=1)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    return ConfigError(f"unknown key {key!r} in {where}{hint}; valid keys: {', '.join(sorted(valid))}")


def read_config_file(path, subcommand: Optional[str] = None) -> Dict[str, Any]:
    """Parse and type-check a flat JSON config file."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {p}: expected a flat JSON object")
    valid = SUBCOMMAND_KEYS[subcommand] if subcommand else tuple(KEYS)
    out = {}
    for key, value in raw.items():
        if key not in valid:
            if key in KEYS:
                raise ConfigError(f"key {key!r} in {p} is not used by {subcommand}")
            raise _unknown(key, valid, str(p))
        out[key] = _check_type(key, value)
    return out


def resolve(subcommand: str, file_values: Dict[str, Any], flag_values: Dict[str, Any]) -> RunConfig:
    values, sources = {}, {}
    for key in SUBCOMMAND_KEYS[subcommand]:
        if key in flag_values:
            values[key], sources[key] = _check_type(key, flag_values[key]), "flag"
        elif key in file_values:
            values[key], sources[key] = file_values[key], "file"
        else:
            values[key], sources[key] = KEYS[key].default, "default"
    _validate(values)
    return RunConfig(subcommand, values, sources)


def load_config(path=None, subcommand: str = "attack", overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Resolve defaults <- JSON file <- ``overrides`` (flag values) for ``subcommand``."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    file_values = read_config_file(path, subcommand) if path is not None else {}
    overrides = dict(overrides or {})
    for key in overrides:
        if key not in SUBCOMMAND_KEYS[subcommand]:
            raise _unknown(key, SUBCOMMAND_KEYS[subcommand], "overrides")
    return resolve(subcommand, file_values, overrides)


def _validate(v: Dict[str, Any]) -> None:
    for key, (lo, hi) in _RANGES.items():
        if v.get(key) is None:
            continue
        if key == "epsilon":
            if not lo < v[key] <= hi:
                raise ConfigError(f"key 'epsilon': must lie in (0, 255], got {v[key]}")
        elif v[key] < lo or (hi is not None and v[key] > hi):
            raise ConfigError(f"key {key!r}: must be >= {lo}, got {v[key]}")
    for key in _POSITIVE:
        if v.get(key) is not None and not v[key] > 0:
            raise ConfigError(f"key {key!r}: must be > 0, got {v[key]}")
    for key in _UNIT_OPEN:
        if key in v and not 0 < v[key] < 1:
            raise ConfigError(f"key {key!r}: must lie in (0, 1), got {v[key]}")
    if "mu" in v and v["mu"] < 0:
        raise ConfigError(f"key 'mu': must be >= 0, got {v['mu']}")
    if "p" in v and not 0 <= v["p"] <= 1:
        raise ConfigError(f"key 'p': must lie in [0, 1], got {v['p']}")
    choices = {"split": ("train", "test", "all"), "task": ("digits", "parity"), "arch": ARCHITECTURES, "attack": ATTACK_NAMES}
    for key, allowed in choices.items():
        if key in v and v[key] not in allowed:
            raise ConfigError(f"key {key!r}: {v[key]!r} is not one of {', '.join(allowed)}")
    if ("images" in v) and ((v["images"] is None) != (v["labels"] is None)):
        raise ConfigError("keys 'images' and 'labels' must be given together")
    for key in ("images", "labels"):
        if v.get(key) is not None and not Path(v[key]).is_file():
            raise ConfigError(f"key {key!r}: file not found: {v[key]}")


# ---------------------------------------------------------------------------
# inputs


@dataclass
class Inputs:
    hashes: Dict[str, str] = field(default_factory=dict)

    def record(self, label: str, path) -> None:
        self.hashes[label] = _sha256(Path(path).read_bytes())


def _sha256(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def _dataset(cfg: RunConfig, inputs: Inputs) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg.images is not None:
        ds = load_idx(cfg.images, cfg.labels)
        inputs.record("images", cfg.images)
        inputs.record("labels", cfg.labels)
    else:
        ds = bundled_digits()
        inputs.hashes["dataset"] = ds.digest()
    if cfg.n_test >= len(ds):
        raise ConfigError(f"key 'n_test': {cfg.n_test} leaves no training images out of {len(ds)}")
    return train_test_split(ds, cfg.n_test, SPLIT_SEED)


def _split(cfg: RunConfig, inputs: Inputs) -> LabeledDataset:
    train_ds, test_ds = _dataset(cfg, inputs)
    if cfg.split == "all":
        ds = _concat(train_ds, test_ds)
    else:
        ds = train_ds if cfg.split == "train" else test_ds
    return ds


def _concat(a: LabeledDataset, b: LabeledDataset) -> LabeledDataset:
    order = np.argsort(np.concatenate([a.indices, b.indices]), kind="stable")
    return LabeledDataset(
        images=np.concatenate([a.images, b.images])[order],
        labels=np.concatenate([a.labels, b.labels])[order],
        split="all",
        provenance=a.provenance,
        indices=np.concatenate([a.indices, b.indices])[order],
    )


def _subset(cfg: RunConfig, ds: LabeledDataset) -> LabeledDataset:
    if cfg.n > len(ds):
        raise ConfigError(f"key 'n': {cfg.n} exceeds the {len(ds)} images of split {cfg.split!r}")
    return fixed_subset(ds, cfg.n, cfg.subset_seed)


def _model(path: Optional[str], bundled: str, inputs: Inputs, label: str) -> Model:
    if path is None:
        p = bundled_weights_path(bundled)
        inputs.hashes[f"{label}:{bundled}"] = _sha256(p.read_bytes())
        return load_bundled(bundled)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"weights file not found: {p}")
    inputs.record(f"{label}:{p.name}", p)
    model = load_weights(p, name=p.stem)
    return model.freeze()


def _targets(cfg: RunConfig, source: Model, inputs: Inputs) -> List[Model]:
    if cfg.targets is None:
        return [source] + [load_bundled(n) for n in ("miniresnet-digits", "minivgg-parity") if n != source.name]
    models = [source]
    for path in cfg.targets:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"key 'targets': weights file not found: {p}")
        inputs.record(f"target:{p.name}", p)
        models.append(load_weights(p, name=p.stem).freeze())
    return models


def _check_taps(source: Model, key: str, taps) -> None:
    for tap in taps or ():
        try:
            source.layer(tap)
        except KeyError as exc:
            raise ConfigError(f"key {key!r}: {exc.args[0]}") from None


def _check_paths(cfg: RunConfig) -> None:
    """Validate every referenced input path before any computation starts."""
    if cfg.subcommand != "train" and "weights" in cfg.values and cfg.weights is not None:
        if not Path(cfg.weights).is_file():
            raise ConfigError(f"key 'weights': file not found: {cfg.weights}")
    for path in cfg.values.get("targets") or []:
        if not Path(path).is_file():
            raise ConfigError(f"key 'targets': file not found: {path}")


# ---------------------------------------------------------------------------
# subcommands


def _write_manifest(out: Path, cfg: RunConfig, inputs: Inputs, outputs: Sequence[Path], seeds: Dict[str, int]) -> Path:
    manifest = {
        "command": cfg.subcommand,
        "config": cfg.echo(),
        "config_sources": dict(sorted(cfg.sources.items())),
        "seeds": seeds,
        "inputs": dict(sorted(inputs.hashes.items())),
        "outputs": {p.name: _sha256(p.read_bytes()) for p in sorted(outputs)},
        "version": __version__,
    }
    path = out / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def cmd_train(cfg: RunConfig, out: Path, inputs: Inputs) -> List[Path]:
    train_ds, test_ds = _dataset(cfg, inputs)
    if cfg.task != "digits":
        train_ds, test_ds = train_ds.relabel(cfg.task), test_ds.relabel(cfg.task)
    classes = 10 if cfg.task == "digits" else 2
    name = f"{cfg.arch}-{cfg.task}"
    model = Model(cfg.arch, num_classes=classes, seed=cfg.seed, name=name, task=cfg.task)
    summary = train(model, train_ds, cfg.epochs, cfg.train_lr, cfg.seed, batch_size=cfg.batch_size, held_out=test_ds)
    weights = Path(cfg.weights) if cfg.weights else out / f"{name}.drw"
    weights.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, weights)
    record = {
        "model": name,
        "checksum": model.checksum(),
        "epoch_loss": [round(x, 6) for x in summary.epoch_loss],
        "train_accuracy": summary.train_accuracy,
        "test_accuracy": summary.test_accuracy,
        "seed": summary.seed,
    }
    path = out / "train.json"
    atomic_write_text(path, json.dumps(record, indent=2, sort_keys=True) + "\n")
    acc = "n/a" if summary.test_accuracy is None else f"{summary.test_accuracy:.4f}"
    print(f"{name}: held-out accuracy {acc}, weights -> {weights}")
    return [path] + ([weights] if weights.parent == out else [])


def cmd_attack(cfg: RunConfig, out: Path, inputs: Inputs) -> List[Path]:
    source = _model(cfg.weights, "minivgg-digits", inputs, "source")
    _check_taps(source, "tap", [cfg.tap] if cfg.tap else None)
    ds = _split(cfg, inputs)
    if cfg.index is not None:
        if cfg.index >= len(ds):
            raise ConfigError(f"key 'index': {cfg.index} outside split of {len(ds)} images")
        ds = ds.take([cfg.index], f"{ds.split}[{cfg.index}]")
    else:
        ds = _subset(cfg, ds)
    acfg = cfg.attack_config()
    labels = task_labels(ds.labels, source.task)
    res = run_attack(cfg.attack, source, ds.images, labels, acfg, ds.indices)
    x_adv = np.asarray(res.x_adv.data)
    clean, adv = source.predict(ds.images), source.predict(x_adv)
    written = []
    for i, idx in enumerate(ds.indices):
        path = out / f"panel-{int(idx):05d}.ppm"
        write_panel(ds.images[i], x_adv[i], acfg.epsilon, path)
        written.append(path)
    trace = np.atleast_2d(np.asarray(res.trace, dtype=np.float64))
    per_image = [
        {
            "index": int(idx),
            "label": int(labels[i]),
            "clean_pred": int(clean[i]),
            "adv_pred": int(adv[i]),
            "linf": round(float(res.linf[i]) if np.ndim(res.linf) else float(res.linf), 8),
            "trace": [round(float(t), 6) for t in trace[:, i]] if trace.size else [],
        }
        for i, idx in enumerate(ds.indices)
    ]
    result = {
        "attack": cfg.attack,
        "source": source.name,
        "iterations": res.iterations,
        "tap": acfg.tap_layer or (source.default_tap() if cfg.attack == "dr" else None),
        "images": per_image,
        "fooled": float((adv != clean).mean()),
    }
    path = out / "attack.json"
    atomic_write_text(path, json.dumps(result, indent=2, sort_keys=True) + "\n")
    np.save(out / "x_adv.npy", x_adv)
    written += [path, out / "x_adv.npy"]
    print(f"{cfg.attack} on {source.name}: {len(ds)} images, prediction flipped on {result['fooled']:.1%}")
    return written


def cmd_eval(cfg: RunConfig, out: Path, inputs: Inputs) -> List[Path]:
    source = _model(cfg.weights, "minivgg-digits", inputs, "source")
    _check_taps(source, "tap", [cfg.tap] if cfg.tap else None)
    targets = _targets(cfg, source, inputs)
    ds = _subset(cfg, _split(cfg, inputs))
    report = transfer_eval(source, targets, cfg.attack, cfg.attack_config(), ds)
    for t in targets:
        if t.task != source.task:
            report.findings.extend(cross_task_findings(source, t, report.rows))
    report.config = report.config | {"run": cfg.echo()}
    paths = report.write(out, "eval")
    _print_rows(report)
    return list(paths)


def cmd_profile(cfg: RunConfig, out: Path, inputs: Inputs) -> List[Path]:
    source = _model(cfg.weights, "minivgg-digits", inputs, "source")
    targets = _targets(cfg, source, inputs)
    ds = _subset(cfg, _split(cfg, inputs))
    taps = cfg.taps or list(TAP_GROUPS[source.arch].values())
    _check_taps(source, "taps", taps)
    report = layer_profile(source, taps, targets, cfg.attack_config(), ds)
    report.config = report.config | {"run": cfg.echo()}
    paths = report.write(out, "profile")
    _print_rows(report)
    return list(paths)


def _print_rows(report: EvalReport) -> None:
    for r in report.rows:
        print(f"{r.attack:9s} {r.tap:10s} -> {r.target:18s} n={r.n:3d} adv_acc={r.adv_acc:.3f} linf={r.mean_linf:.5f}")
    for f in report.findings:
        print(f"finding: {f}")


# ---------------------------------------------------------------------------
# demo: the pinned acceptance run

DEMO_ATTACKS = ("dr", "mi_fgsm", "dim", "fgsm")
DEMO_PANELS = 3


def load_pins() -> Dict[str, Any]:
    path = bundled_weights_path("minivgg-digits").parent / "pins.json"
    return json.loads(path.read_text(encoding="utf-8"))


def demo_subset(pins: Optional[Dict[str, Any]] = None) -> LabeledDataset:
    pins = pins or load_pins()
    sub = pins["subset"]
    _, test_ds = train_test_split(bundled_digits(), sub["n_test"], sub["split_seed"])
    ds = fixed_subset(test_ds, sub["n"], sub["seed"])
    if ds.digest() != sub["digest"]:
        raise BudgetViolation(f"pinned subset digest {sub['digest']} does not match rebuilt subset {ds.digest()}")
    return ds


def run_demo(out: Path, inputs: Optional[Inputs] = None) -> List[Path]:
    inputs = inputs or Inputs()
    pins = load_pins()
    ds = demo_subset(pins)
    inputs.hashes["subset"] = ds.digest()
    names = ("minivgg-digits", "miniresnet-digits", "minivgg-parity")
    for n in names:
        inputs.hashes[f"model:{n}"] = _sha256(bundled_weights_path(n).read_bytes())
    source, *others = [load_bundled(n) for n in names]
    targets = [source] + others
    acfg = AttackConfig(seed=pins["seed"])

    report = EvalReport([], {"attacks": list(DEMO_ATTACKS), "attack_config": acfg.as_dict()}, acfg.seed, acfg.epsilon)
    dr_set = None
    for attack in DEMO_ATTACKS:
        part = transfer_eval(source, targets, attack, acfg, ds)
        report.rows.extend(part.rows)
        if attack == "dr":
            dr_set = part.adversarial
            report.config |= {"dataset": part.config["dataset"], "dataset_digest": ds.digest(), "n_images": len(ds)}
    parity = others[-1]
    report.findings.extend(cross_task_findings(source, parity, report.rows))
    truth = task_labels(ds.labels, source.task)
    halved = float(np.mean(dr_set.dispersion_ratio <= 0.5))
    clean_acc = float(np.mean(source.predict(ds.images) == truth))
    adv_acc = float(np.mean(source.predict(dr_set.images) == truth))
    report.findings.append(
        f"dr efficacy at {dr_set.tap}: std halved on {halved:.2f} of images, "
        f"median ratio {np.median(dr_set.dispersion_ratio):.3f}; "
        f"source label accuracy {clean_acc:.2f} clean, {adv_acc:.2f} adversarial"
    )
    report.findings.extend(_pin_findings(report, pins))
    paths = list(report.write(out, "report"))

    clean, adv = source.predict(ds.images), source.predict(dr_set.images)
    lines = ["index,label,clean_pred,adv_pred,std_before,std_after,ratio,linf"]
    for i, idx in enumerate(ds.indices):
        lines.append(
            f"{int(idx)},{int(ds.labels[i])},{int(clean[i])},{int(adv[i])},"
            f"{dr_set.dispersion_before[i]:.6f},{dr_set.dispersion_after[i]:.6f},"
            f"{dr_set.dispersion_ratio[i]:.6f},{dr_set.linf[i]:.8f}"
        )
    per_image = out / "dr_images.csv"
    atomic_write_text(per_image, "\n".join(lines) + "\n")
    paths.append(per_image)
    for i in range(min(DEMO_PANELS, len(ds))):
        p = out / f"panel-{int(ds.indices[i]):05d}.ppm"
        write_panel(ds.images[i], dr_set.images[i], acfg.epsilon, p)
        paths.append(p)
    _print_rows(report)
    return paths


def _pin_findings(report: EvalReport, pins: Dict[str, Any]) -> List[str]:
    out = []
    for label, (attack, target) in (("dr_transfer_drop", ("dr", "miniresnet-digits")), ("dr_cross_task_drop", ("dr", "minivgg-parity"))):
        pinned = pins[label]
        drop = report.row(attack, target).drop
        verdict = "holds" if drop >= pinned - 0.05 else "BELOW floor"
        out.append(f"{label}: measured {drop:.3f}, pinned {pinned:.3f}, floor {pinned - 0.05:.3f} {verdict}")
    return out


def cmd_demo(cfg: RunConfig, out: Path, inputs: Inputs) -> List[Path]:
    return run_demo(out, inputs)


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "profile": cmd_profile, "demo": cmd_demo}


# ---------------------------------------------------------------------------
# argument parsing


def _flag_type(key: str):
    entry = KEYS[key]
    if entry.types is _LIST:
        return lambda s: [item for item in s.split(",") if item]
    if entry.types is _INT:
        return int
    if entry.types is _NUM:
        return float
    return str


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse's own exit code is already 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drkit", description="Dispersion-reduction attacks and transfer evaluation on small digit models.")
    parser.add_argument("--version", action="version", version=f"drkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)
    sub.required = True
    blurbs = {
        "train": "train a model and save its weights",
        "attack": "attack one image or a subset and export panels",
        "eval": "craft on a source model and score every target",
        "profile": "dr transfer per tap layer (shallow, mid, deep)",
        "demo": "pinned end-to-end run writing the acceptance report",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=blurbs[name], description=blurbs[name])
        p.add_argument("--config", default=argparse.SUPPRESS, help="flat JSON file of the keys below; flags win")
        for key in SUBCOMMAND_KEYS[name]:
            entry = KEYS[key]
            default = "per attack" if key == "iters" else "unset" if entry.default is None else entry.default
            p.add_argument(
                f"--{key}",
                type=_flag_type(key),
                default=argparse.SUPPRESS,
                metavar=key.upper(),
                help=f"{entry.help} (default: {default}{'; ' + entry.origin if entry.origin else ''})",
            )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    subcommand = args.pop("subcommand")
    verbose = args.pop("verbose")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")
    config_path = args.pop("config", None)
    try:
        cfg = load_config(config_path, subcommand, args)
        _check_paths(cfg)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = Inputs()
        if config_path is not None:
            inputs.record("config", config_path)
        outputs = COMMANDS[subcommand](cfg, out, inputs)
        seeds = {k: cfg.values[k] for k in ("seed", "subset_seed") if k in cfg.values}
        seeds["split_seed"] = SPLIT_SEED
        if subcommand == "demo":
            seeds["seed"] = load_pins()["seed"]
        _write_manifest(out, cfg, inputs, outputs, seeds)
    except (ConfigError, IDXFormatError, WeightsFormatError, FileNotFoundError, KeyError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"drkit: error: {message}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetViolation, NonFiniteError, TrainingDiverged) as exc:
        print(f"drkit: invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
