"""Metrics, defense-vs-attack evaluation, perturbation sweeps, and delay.

Accuracy is computed globally over the evaluation set; precision, recall and
F1 are computed per class and then averaged with true-class supports as
weights. Adversarial sets are cached by a hash of (attack config, threat
model, target model checksum, corpus hash) so repeated evaluations reuse
byte-identical inputs.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackConfig, AttackFamily, ThreatModel, run_attack
from .common import array_content_hash, config_hash, model_checksum
from .dataset import LabeledDataset, RangeTag
from .defenses import DefenseKind, DefenseSpec, apply_defense_pipeline, apply_transform
from .reconstruction import ReconstructionConfig, reconstruct_batch

logger = logging.getLogger(__name__)

DEFAULT_EPSILON_GRID = (0.05, 0.10, 0.15, 0.20)
SWEEP_FAMILIES = (AttackFamily.FGSM, AttackFamily.DEEPFOOL, AttackFamily.PGD_L2)


@dataclass
class MetricSet:
    confusion: np.ndarray              # (2, 2), rows = true class
    accuracy: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    support_per_class: np.ndarray
    zero_division_flag: bool = False

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision_weighted": self.precision_weighted,
            "recall_weighted": self.recall_weighted,
            "f1_weighted": self.f1_weighted,
            "confusion": self.confusion.tolist(),
            "support_per_class": self.support_per_class.tolist(),
            "zero_division_flag": self.zero_division_flag,
        }


def compute_metrics(predictions, labels, n_classes: int = 2) -> MetricSet:
    """Confusion matrix plus global accuracy and support-weighted P/R/F1.

    Per-class metrics with a zero denominator contribute 0 and set
    ``zero_division_flag``.
    """
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise ValueError("predictions and labels must be equal-length 1-D sequences")
    if preds.size == 0:
        raise ValueError("cannot compute metrics on empty inputs")

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(labs, preds):
        confusion[t, p] += 1
    support = confusion.sum(axis=1)
    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total)

    zero_division = False
    precision = np.zeros(n_classes)
    recall = np.zeros(n_classes)
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        tp = confusion[c, c]
        pred_c = confusion[:, c].sum()
        if pred_c > 0:
            precision[c] = tp / pred_c
        else:
            zero_division = True
        if support[c] > 0:
            recall[c] = tp / support[c]
        else:
            zero_division = True
        if precision[c] + recall[c] > 0:
            f1[c] = 2 * precision[c] * recall[c] / (precision[c] + recall[c])
        elif support[c] > 0:
            zero_division = True

    weights = support / total
    return MetricSet(
        confusion=confusion,
        accuracy=accuracy,
        precision_weighted=float((weights * precision).sum()),
        recall_weighted=float((weights * recall).sum()),
        f1_weighted=float((weights * f1).sum()),
        support_per_class=support,
        zero_division_flag=zero_division,
    )


@dataclass
class DelayStats:
    mean: float
    p50: float
    p95: float
    work_units: int
    n_samples: int

    def as_dict(self) -> dict:
        return {"mean_seconds": self.mean, "p50_seconds": self.p50,
                "p95_seconds": self.p95, "work_units": self.work_units,
                "n_samples": self.n_samples}


def measure_delay(pipeline, test_set: LabeledDataset, limit: int | None = None,
                  work_units: int = 0) -> DelayStats:
    """Per-image wall clock of ``pipeline(image) -> label`` over the set.

    ``work_units`` is carried through as the hardware-independent cost figure.
    """
    unit = test_set.to_range(RangeTag.UNIT)
    n = len(unit) if limit is None else min(limit, len(unit))
    delays = []
    for i in range(n):
        t0 = time.perf_counter()
        pipeline(unit.images[i])
        delays.append(time.perf_counter() - t0)
    delays_np = np.array(delays)
    return DelayStats(mean=float(delays_np.mean()),
                      p50=float(np.percentile(delays_np, 50)),
                      p95=float(np.percentile(delays_np, 95)),
                      work_units=work_units, n_samples=n)


class AdversarialCache:
    """Content-addressed store of crafted adversarial sets (.npz files)."""

    def __init__(self, cache_dir: str | Path | None):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / "adv" / f"{key}.npz"

    def get(self, key: str) -> np.ndarray | None:
        path = self._path(key)
        if path is not None and path.is_file():
            self.hits += 1
            return np.load(path)["adversarial"]
        self.misses += 1
        return None

    def put(self, key: str, adversarial: np.ndarray) -> None:
        path = self._path(key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path, adversarial=adversarial)


@dataclass
class EvaluationContext:
    """Trained models plus evaluation knobs shared across scenarios."""

    defense_specs: dict[str, DefenseSpec]        # kind value -> spec with paired models
    surrogate_classifier: object
    seed: int = 0
    cache: AdversarialCache = field(default_factory=lambda: AdversarialCache(None))
    recon_batch: int = 256
    delay_sample: int = 8

    def spec(self, kind: DefenseKind | str) -> DefenseSpec:
        return self.defense_specs[DefenseKind(kind).value]


def craft_adversarial_set(images: torch.Tensor, labels: torch.Tensor,
                          attack: AttackConfig, target_classifier,
                          cache: AdversarialCache) -> tuple[torch.Tensor, str]:
    """Craft (or load cached) adversarial images against a classifier.

    For the black-box threat model the caller passes the surrogate as
    ``target_classifier``; the crafted set transfers unchanged to any victim.

    Returns:
        (adversarial images, cache key).
    """
    key = config_hash({
        "family": attack.family.value,
        "epsilon": attack.epsilon,
        "max_iterations": attack.max_iterations,
        "overshoot": attack.overshoot,
        "confidence_weight": attack.confidence_weight,
        "step_size": attack.step_size,
        "threat_model": attack.threat_model.value,
        "model": model_checksum(target_classifier),
        "corpus": array_content_hash(images.numpy()),
        "labels": array_content_hash(labels.numpy()),
    })
    cached = cache.get(key)
    if cached is not None:
        logger.info("adversarial cache hit for %s/%s", attack.family.value,
                    attack.threat_model.value)
        return torch.from_numpy(cached), key
    result = run_attack(images, labels, target_classifier, attack)
    cache.put(key, result.adversarial.numpy())
    return result.adversarial, key


def defense_predictions(spec: DefenseSpec, images: torch.Tensor, ctx: EvaluationContext,
                        progress_label: str | None = None) -> torch.Tensor:
    """Batched defense pipeline: transform (or reconstruct) then classify."""
    if spec.paired_classifier is None:
        raise ValueError(f"defense {spec.kind.value} has no paired classifier")
    if spec.kind == DefenseKind.AR_GAN:
        recon = reconstruct_batch(images, spec.generator,
                                  spec.recon_config or ReconstructionConfig(),
                                  max_latent_batch=ctx.recon_batch,
                                  progress_label=progress_label)
        transformed = recon.images_unit
    else:
        transformed = apply_transform(images, spec, seed=ctx.seed)
    return spec.paired_classifier.predict(transformed)


@dataclass
class EvaluationOutcome:
    defense: str
    attack_family: str | None
    threat_model: str | None
    epsilon: float | None
    metrics: MetricSet
    delay: DelayStats
    adversarial_key: str | None = None
    adversarial_sha: str | None = None

    def as_dict(self) -> dict:
        return {"defense": self.defense, "attack_family": self.attack_family,
                "threat_model": self.threat_model, "epsilon": self.epsilon,
                "metrics": self.metrics.as_dict(), "delay": self.delay.as_dict(),
                "adversarial_key": self.adversarial_key,
                "adversarial_sha": self.adversarial_sha}


def evaluate_defense(spec: DefenseSpec, attack: AttackConfig | None,
                     test_set: LabeledDataset, ctx: EvaluationContext,
                     measure_delays: bool = True) -> EvaluationOutcome:
    """One table cell: metrics of a defense on clean or attacked inputs.

    White-box attacks are crafted against the defense's paired classifier on
    the raw input; black-box attacks against the shared surrogate.
    """
    unit = test_set.to_range(RangeTag.UNIT)
    images, labels = unit.images, unit.labels
    adv_key = adv_sha = None
    if attack is not None:
        if attack.threat_model == ThreatModel.BLACK_BOX:
            target = ctx.surrogate_classifier
        else:
            target = spec.paired_classifier
        images, adv_key = craft_adversarial_set(images, labels, attack, target, ctx.cache)
        adv_sha = array_content_hash(images.numpy())

    label_tag = f"{spec.kind.value}" + (f"/{attack.family.value}" if attack else "/clean")
    preds = defense_predictions(spec, images, ctx, progress_label=label_tag)
    metrics = compute_metrics(preds.numpy(), labels.numpy())

    work_units = (spec.recon_config.work_units
                  if spec.kind == DefenseKind.AR_GAN and spec.recon_config else 0)
    if measure_delays and ctx.delay_sample > 0:
        probe = LabeledDataset(images[:ctx.delay_sample], labels[:ctx.delay_sample],
                               RangeTag.UNIT, None, unit.provenance)
        delay = measure_delay(lambda img: apply_defense_pipeline(img, spec, seed=ctx.seed)[0],
                              probe, work_units=work_units)
    else:
        delay = DelayStats(0.0, 0.0, 0.0, work_units, 0)

    return EvaluationOutcome(
        defense=spec.kind.value,
        attack_family=attack.family.value if attack else None,
        threat_model=attack.threat_model.value if attack else None,
        epsilon=attack.epsilon if attack else None,
        metrics=metrics, delay=delay,
        adversarial_key=adv_key, adversarial_sha=adv_sha,
    )


@dataclass
class SweepCurve:
    attack_family: str
    threat_model: str
    defense: str
    points: list[tuple[float, float]]    # (epsilon, accuracy), epsilon strictly increasing

    def __post_init__(self):
        eps = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon values must be strictly increasing")


def epsilon_sweep(families, threat_models, defense_kinds, epsilon_grid,
                  test_set: LabeledDataset, ctx: EvaluationContext,
                  base_attacks: dict[str, AttackConfig] | None = None) -> list[SweepCurve]:
    """Accuracy curves over the perturbation grid for each (family, threat, defense).

    Only FGSM, DeepFool and PGD take part (the fixed-weight L2 optimization
    attack has no epsilon).
    """
    grid = [float(e) for e in epsilon_grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("epsilon grid must be non-empty and strictly increasing")
    curves: list[SweepCurve] = []
    acc: dict[tuple, list] = {}
    for family in families:
        family = AttackFamily(family)
        if family not in SWEEP_FAMILIES:
            raise ValueError(f"{family.value} is not sweepable")
        for threat in threat_models:
            threat = ThreatModel(threat)
            for eps in grid:
                base = (base_attacks or {}).get(family.value)
                attack = AttackConfig(
                    family=family, epsilon=eps,
                    max_iterations=base.max_iterations if base else 100,
                    overshoot=base.overshoot if base else 0.02,
                    threat_model=threat,
                )
                for kind in defense_kinds:
                    spec = ctx.spec(kind)
                    outcome = evaluate_defense(spec, attack, test_set, ctx,
                                               measure_delays=False)
                    acc.setdefault((family.value, threat.value, spec.kind.value), []).append(
                        (eps, outcome.metrics.accuracy))
    for (family, threat, defense), points in acc.items():
        curves.append(SweepCurve(family, threat, defense, points))
    return curves


def write_sweep_csvs(curves: list[SweepCurve], out_dir: str | Path) -> list[Path]:
    """One CSV per (family, threat): rows = epsilon, columns = defenses."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grouped: dict[tuple[str, str], list[SweepCurve]] = {}
    for c in curves:
        grouped.setdefault((c.attack_family, c.threat_model), []).append(c)
    paths = []
    for (family, threat), group in sorted(grouped.items()):
        path = out_dir / f"fig9_{family}_{threat}.csv"
        defenses = [c.defense for c in group]
        eps_values = [p[0] for p in group[0].points]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epsilon"] + defenses)
            for i, eps in enumerate(eps_values):
                writer.writerow([eps] + [f"{c.points[i][1]:.4f}" for c in group])
        paths.append(path)
    return paths


TABLE_METRIC_COLUMNS = ("precision", "recall", "f1_score", "accuracy")


def _metric_row(outcome_dict: dict) -> list[str]:
    m = outcome_dict["metrics"]
    return [f"{m['precision_weighted']:.4f}", f"{m['recall_weighted']:.4f}",
            f"{m['f1_weighted']:.4f}", f"{m['accuracy']:.4f}"]


def write_clean_table(outcomes: list[dict], path: str | Path) -> Path:
    """Unperturbed-images comparison: one row per defense."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("defense_method",) + TABLE_METRIC_COLUMNS)
        for o in outcomes:
            writer.writerow([o["defense"]] + _metric_row(o))
    return path


def write_attack_table(outcomes: list[dict], path: str | Path) -> Path:
    """Attacked-images comparison: one row per (attack, defense)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("attack_type", "defense_method") + TABLE_METRIC_COLUMNS)
        for o in outcomes:
            writer.writerow([o["attack_family"], o["defense"]] + _metric_row(o))
    return path


def render_markdown_tables(table_rows: dict[str, list[dict]]) -> str:
    """Human-readable rendering of the emitted tables (diff-friendly)."""
    lines = []
    for title, rows in table_rows.items():
        lines.append(f"## {title}")
        lines.append("")
        has_attack = any(r.get("attack_family") for r in rows)
        header = (["attack", "defense"] if has_attack else ["defense"]) + \
            [c for c in TABLE_METRIC_COLUMNS]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for r in rows:
            cells = ([r.get("attack_family") or "-", r["defense"]] if has_attack
                     else [r["defense"]])
            cells += _metric_row(r)
            lines.append("| " + " | ".join(str(c) for c in cells) + " |")
        lines.append("")
    return "\n".join(lines)
