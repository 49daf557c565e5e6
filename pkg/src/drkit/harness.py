"""Transfer evaluation at desk scale: white-box, cross-model, cross-task, and layer profiles.

Ground truth for a target is its own clean prediction. An image counts
toward a target's row only if that target classifies the clean image
correctly, so every row starts from a 100% baseline; ``clean_acc`` reports
the plain dataset-label accuracy alongside.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .attacks import LINF_SLACK, AttackConfig, BudgetViolation, check_linf, feature_dispersion, run_attack
from .data import LabeledDataset, task_labels
from .models import Model

CSV_FIELDS = (
    "source",
    "attack",
    "tap",
    "target",
    "task",
    "n",
    "clean_acc",
    "adv_acc",
    "mean_linf",
    "dispersion_ratio",
    "seed",
)
CHUNK = 50

# Published figures, kept for comparison in reports only.
PUBLISHED_REFERENCE = {
    "vgg16_dr_labels_acc": 0.23,
    "vgg16_conv3.3_to_inception_v3_acc": 0.287,
    "vgg16_conv1.2_to_inception_v3_acc": 0.525,
}


@dataclass(frozen=True)
class EvalRow:
    source: str
    attack: str
    tap: str
    target: str
    task: str
    n: int
    clean_acc: float
    adv_acc: float
    mean_linf: float
    dispersion_ratio: float
    seed: int

    @property
    def drop(self) -> float:
        """Accuracy drop from the 100% clean-prediction baseline."""
        return 1.0 - self.adv_acc


@dataclass
class EvalReport:
    rows: List[EvalRow]
    config: Dict
    seed: int
    epsilon: float
    version: str = __version__
    findings: List[str] = field(default_factory=list)
    adversarial: Optional["AdversarialSet"] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        bound = self.epsilon / 255.0 + LINF_SLACK
        for row in self.rows:
            if row.n <= 0:
                raise ValueError(f"row {row.attack}->{row.target}: empty denominator")
            if not (0 <= row.clean_acc <= 1 and 0 <= row.adv_acc <= 1):
                raise ValueError(f"row {row.attack}->{row.target}: accuracy outside [0, 1]")
            if row.mean_linf > bound:
                raise BudgetViolation(f"row {row.attack}->{row.target}: mean L-inf {row.mean_linf} > {bound}")

    def row(self, attack: str, target: str, tap: Optional[str] = None) -> EvalRow:
        for r in self.rows:
            if r.attack == attack and r.target == target and (tap is None or r.tap == tap):
                return r
        raise KeyError(f"no row for attack={attack} target={target} tap={tap}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in self.rows:
            writer.writerow(_fmt(getattr(r, k)) for k in CSV_FIELDS)
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "rows": [{k: _round(getattr(r, k)) for k in CSV_FIELDS} for r in self.rows],
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "findings": self.findings,
            "published_reference": PUBLISHED_REFERENCE,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write(self, directory, stem: str) -> Tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = directory / f"{stem}.csv", directory / f"{stem}.json"
        atomic_write_text(csv_path, self.to_csv())
        atomic_write_text(json_path, self.to_json())
        return csv_path, json_path

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        self.findings.extend(other.findings)


def _round(v):
    return round(float(v), 6) if isinstance(v, (float, np.floating)) else v


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, (float, np.floating)) else str(v)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    tmp.replace(path)


def worker_count() -> int:
    env = os.environ.get("DR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"DR_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _require_frozen(*models: Model) -> None:
    for m in models:
        if not m.frozen:
            raise ValueError(f"model {m.name!r} must be frozen before evaluation")


@dataclass
class AdversarialSet:
    images: np.ndarray
    linf: np.ndarray
    dispersion_ratio: np.ndarray
    tap: str
    dispersion_before: Optional[np.ndarray] = None
    dispersion_after: Optional[np.ndarray] = None


def generate(source: Model, attack: str, cfg: AttackConfig, ds: LabeledDataset) -> AdversarialSet:
    """Attack every image of ``ds`` on ``source`` in fixed-size chunks.

    Chunks are independent jobs; results are reassembled by image position so
    worker count never changes the output.
    """
    tap = cfg.tap_layer or source.default_tap()
    labels = task_labels(ds.labels, source.task)
    starts = list(range(0, len(ds), CHUNK))

    def job(start: int):
        sl = slice(start, start + CHUNK)
        res = run_attack(attack, source, ds.images[sl], labels[sl], cfg, ds.indices[sl])
        return start, np.asarray(res.x_adv.data)

    workers = min(worker_count(), len(starts)) or 1
    if workers == 1:
        parts = [job(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, starts))
    parts.sort(key=lambda p: p[0])
    x_adv = np.concatenate([p[1] for p in parts]) if parts else np.zeros_like(ds.images)
    linf = check_linf(ds.images, x_adv, cfg.epsilon)
    before = feature_dispersion(source, ds.images, tap)
    after = feature_dispersion(source, x_adv, tap)
    ratio = np.divide(after, before, out=np.full_like(after, np.nan), where=before > 0)
    return AdversarialSet(x_adv, linf, ratio, tap, before, after)


def _score(source, target, attack, adv: AdversarialSet, ds, cfg, clean_pred=None) -> EvalRow:
    truth = task_labels(ds.labels, target.task)
    clean = target.predict(ds.images) if clean_pred is None else clean_pred
    keep = clean == truth
    if not keep.any():
        raise ValueError(f"target {target.name!r} misclassifies every clean image")
    # re-verify the budget on exactly the images this row counts
    linf = check_linf(ds.images[keep], adv.images[keep], cfg.epsilon)
    adv_pred = target.predict(adv.images[keep])
    ratio = adv.dispersion_ratio[keep]
    return EvalRow(
        source=source.name,
        attack=attack,
        tap=adv.tap,
        target=target.name,
        task=target.task,
        n=int(keep.sum()),
        clean_acc=float(keep.mean()),
        adv_acc=float((adv_pred == clean[keep]).mean()),
        mean_linf=float(linf.mean()),
        dispersion_ratio=float(np.nanmean(ratio)) if np.isfinite(ratio).any() else float("nan"),
        seed=cfg.seed,
    )


def transfer_eval(
    source: Model,
    targets: Sequence[Model],
    attack: str,
    cfg: AttackConfig,
    ds: LabeledDataset,
    adversarial: Optional[AdversarialSet] = None,
) -> EvalReport:
    """Craft on ``source`` once, score on every target.

    Pass ``adversarial`` to reuse examples produced by :func:`generate`.
    The crafted set is attached to the report as ``report.adversarial``.
    """
    _require_frozen(source, *targets)
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    _check_shapes(source, targets)
    adv = generate(source, attack, cfg, ds) if adversarial is None else adversarial
    if len(adv.images) != len(ds):
        raise ValueError(f"adversarial set has {len(adv.images)} images, dataset has {len(ds)}")
    rows = [_score(source, t, attack, adv, ds, cfg) for t in targets]
    report = EvalReport(rows, _echo(cfg, attack, ds), cfg.seed, cfg.epsilon)
    report.adversarial = adv
    return report


def layer_profile(
    source: Model, taps: Sequence[str], targets: Sequence[Model], cfg: AttackConfig, ds: LabeledDataset
) -> EvalReport:
    """One DR transfer evaluation per tap, rows ordered by layer depth."""
    taps = sorted(dict.fromkeys(taps), key=source.depth)
    report = EvalReport([], _echo(cfg, "dr", ds) | {"taps": list(taps)}, cfg.seed, cfg.epsilon)
    for tap in taps:
        report.extend(transfer_eval(source, targets, "dr", cfg.with_(tap_layer=tap), ds))
    mid = source.default_tap()
    for t in targets:
        rows = [r for r in report.rows if r.target == t.name]
        low = min(r.adv_acc for r in rows)
        best = [r.tap for r in rows if r.adv_acc == low]
        accs = ", ".join(f"{r.tap}={r.adv_acc:.3f}" for r in rows)
        if len(best) == len(rows):
            verdict = "no tap separates"
        elif best == [mid]:
            verdict = "mid layer best"
        elif mid in best:
            verdict = "mid layer tied for best with " + ", ".join(b for b in best if b != mid)
        else:
            verdict = f"mid layer not best ({', '.join(best)} lowest)"
        report.findings.append(f"target {t.name}: {accs}; {verdict}")
    return report


def cross_task_eval(
    source: Model,
    target: Model,
    cfg: AttackConfig,
    ds: LabeledDataset,
    attacks: Sequence[str] = ("dr", "mi_fgsm"),
    adversarial: Optional[Dict[str, AdversarialSet]] = None,
) -> EvalReport:
    """AEs from a task-A source scored against a task-B target's clean predictions."""
    if source.input_shape != target.input_shape:
        raise ValueError(f"input shape mismatch: source {source.input_shape} vs target {target.input_shape}")
    if source.task == target.task:
        raise ValueError(f"source and target share task {source.task!r}; cross-task needs different label functions")
    adversarial = adversarial or {}
    report = EvalReport([], _echo(cfg, ",".join(attacks), ds), cfg.seed, cfg.epsilon)
    for attack in attacks:
        report.extend(transfer_eval(source, [target], attack, cfg, ds, adversarial.get(attack)))
    report.findings.extend(cross_task_findings(source, target, report.rows))
    return report


def cross_task_findings(source: Model, target: Model, rows: Sequence[EvalRow]) -> List[str]:
    rows = [r for r in rows if r.target == target.name]
    drops = ", ".join(f"{r.attack} drop={r.drop:.3f}" for r in rows)
    out = [f"cross-task {source.task}->{target.task} on {target.name}: {drops}"]
    by_attack = {r.attack: r for r in rows}
    if "dr" in by_attack and "mi_fgsm" in by_attack:
        dr, mi = by_attack["dr"].drop, by_attack["mi_fgsm"].drop
        better = "DR" if dr > mi else "MI-FGSM" if mi > dr else "neither"
        out.append(f"larger cross-task drop on {target.name}: {better} (dr={dr:.3f}, mi_fgsm={mi:.3f})")
    return out


def _check_shapes(source: Model, targets: Sequence[Model]) -> None:
    for t in targets:
        if t.input_shape != source.input_shape:
            raise ValueError(f"target {t.name!r} input {t.input_shape} differs from source {source.input_shape}")


def _echo(cfg: AttackConfig, attack: str, ds: LabeledDataset) -> Dict:
    return {"attack": attack, "attack_config": cfg.as_dict(), "dataset": ds.split, "dataset_digest": ds.digest(), "n_images": len(ds)}
