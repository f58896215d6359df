"""End-to-end experiment orchestration on top of the library modules.

Turns a validated config into artifacts under the output directory:

    out/
      meta.json            producing config hash + environment identifiers
      data/                dataset archive (PNGs + manifest.csv)
      state/               framework stages, surrogate, per-defense classifiers
      attacks/             adversarial archives + manifests
      eval/                per-scenario metric JSON, sweep curves, sensitivity
      report/              final CSV/markdown tables
      cache/               adversarial + transformed-corpus caches
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .attacks import AttackConfig, AttackFamily, ThreatModel, black_box_attack, run_attack
from .common import array_content_hash, config_hash
from .dataset import (CLASS_NAMES, LabeledDataset, RangeTag, generate_synthetic_dataset,
                      ingest_lisa_subset, load_archive, save_archive, split_dataset)
from .defenses import JPEG_CODEC_ID, DefenseKind, DefenseSpec, apply_transform
from .evaluation import (AdversarialCache, EvaluationContext, craft_adversarial_set,
                         epsilon_sweep, evaluate_defense, write_sweep_csvs,
                         render_markdown_tables, write_attack_table, write_clean_table)
from .framework import FrameworkConfig, FrameworkState, run_framework, train_classifier
from .gan_training import GanTrainConfig
from .models import load_checkpoint, save_checkpoint
from .reconstruction import (REFERENCE_OPERATING_POINT, ReconstructionConfig,
                             sensitivity_sweep)

logger = logging.getLogger(__name__)

BASELINE_KINDS = (DefenseKind.GAUSSIAN_AUGMENTATION, DefenseKind.JPEG_COMPRESSION,
                  DefenseKind.FEATURE_SQUEEZING, DefenseKind.MEDIAN_SMOOTHING)
DEFENSE_ORDER = tuple(k.value for k in BASELINE_KINDS) + (DefenseKind.AR_GAN.value,)

# Reference per-image delay reported for the full-scale operating point;
# recorded as metadata only, never asserted (hardware-dependent).
REFERENCE_DELAY_SECONDS = 0.6


class StageFailure(RuntimeError):
    """A pipeline stage could not run (missing artifacts, failed dependency)."""


@dataclass
class Workspace:
    out_dir: Path
    config: dict
    hash: str

    @property
    def data_dir(self) -> Path:
        return self.out_dir / "data"

    @property
    def state_dir(self) -> Path:
        return self.out_dir / "state"

    @property
    def attacks_dir(self) -> Path:
        return self.out_dir / "attacks"

    @property
    def eval_dir(self) -> Path:
        return self.out_dir / "eval"

    @property
    def report_dir(self) -> Path:
        return self.out_dir / "report"

    @property
    def cache_dir(self) -> Path:
        env = os.environ.get("ARGAN_CACHE_DIR")
        return Path(env) if env else self.out_dir / "cache"


def make_workspace(config: dict, cfg_hash: str, out_dir: str | Path | None = None,
                   force: bool = False) -> Workspace:
    """Create/verify the output directory and its meta.json."""
    out = Path(out_dir) if out_dir else Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    meta_path = out / "meta.json"
    if meta_path.is_file() and not force:
        with open(meta_path) as f:
            existing = json.load(f)
        if existing.get("config_hash") != cfg_hash:
            raise StageFailure(
                f"output dir {out} was produced by config {existing.get('config_hash')[:12]}..., "
                f"current config is {cfg_hash[:12]}...; use a fresh directory or --force")
    with open(meta_path, "w") as f:
        json.dump({"config_hash": cfg_hash, "package_version": __version__,
                   "torch_version": torch.__version__, "jpeg_codec": JPEG_CODEC_ID,
                   "seed": config["seed"]}, f, indent=2, sort_keys=True)
    return Workspace(out, config, cfg_hash)


def prepare_dataset(ws: Workspace) -> dict[str, LabeledDataset]:
    """Ingest (or synthesize) the dataset, split it, and archive the splits."""
    manifest = ws.data_dir / "manifest.csv"
    dcfg = ws.config["dataset"]
    provenance = "lisa_subset" if dcfg["kind"] == "lisa" else "synthetic"
    if manifest.is_file():
        logger.info("loading dataset archive from %s", ws.data_dir)
        return load_archive(ws.data_dir, provenance=provenance)
    if dcfg["kind"] == "lisa":
        full = ingest_lisa_subset(dcfg["source_dir"], dcfg["manifest"])
    else:
        full = generate_synthetic_dataset(dcfg["n_per_class"], dcfg["seed"])
    train, val, test = split_dataset(full, ws.config["split_seed"])
    splits = {"train": train, "validation": val, "test": test}
    save_archive(splits, ws.data_dir)
    logger.info("dataset ready: %d train / %d validation / %d test",
                len(train), len(val), len(test))
    return load_archive(ws.data_dir, provenance=provenance)


def gan_config_from(cfg: dict) -> GanTrainConfig:
    g = cfg["gan"]
    return GanTrainConfig(
        gradient_penalty_weight=g["gradient_penalty_weight"],
        critic_steps_per_generator_step=g["critic_steps_per_generator_step"],
        batch_size=g["batch_size"], epochs=g["epochs"],
        learning_rate=g["learning_rate"], adam_beta1=g["adam_beta1"],
        adam_beta2=g["adam_beta2"], checkpoint_interval=g["checkpoint_interval"],
        seeds=tuple(g["seeds"]), latent_dim=g["latent_dim"],
        base_channels=g["base_channels"])


def recon_config_from(cfg: dict) -> ReconstructionConfig:
    r = cfg["reconstruction"]
    return ReconstructionConfig(gradient_steps=r["gradient_steps"],
                                random_restarts=r["random_restarts"],
                                step_size=r["step_size"], seed=r["seed"])


def framework_config_from(cfg: dict) -> FrameworkConfig:
    c = cfg["classifier"]
    return FrameworkConfig(classifier_epochs=c["epochs"], classifier_lr=c["learning_rate"],
                           classifier_batch_size=c["batch_size"], classifier_seed=c["seed"],
                           retrain_epochs=c["retrain_epochs"], quick_epochs=c["quick_epochs"],
                           selection_subset=cfg["evaluation"]["selection_subset"])


def attack_config_for(cfg: dict, family: AttackFamily | str,
                      threat: ThreatModel | str = ThreatModel.WHITE_BOX,
                      epsilon: float | None = None) -> AttackConfig:
    family = AttackFamily(family)
    a = cfg["attacks"]
    eps = a["epsilon"] if epsilon is None else epsilon
    if family == AttackFamily.FGSM:
        return AttackConfig(family=family, epsilon=eps, max_iterations=1, threat_model=threat)
    if family == AttackFamily.DEEPFOOL:
        return AttackConfig(family=family, epsilon=eps,
                            max_iterations=a["deepfool"]["max_iterations"],
                            overshoot=a["deepfool"]["overshoot"], threat_model=threat)
    if family == AttackFamily.CW_L2:
        return AttackConfig(family=family, epsilon=eps,
                            max_iterations=a["cw"]["max_iterations"],
                            confidence_weight=a["cw"]["confidence_weight"],
                            step_size=a["cw"]["step_size"], threat_model=threat)
    return AttackConfig(family=family, epsilon=eps,
                        max_iterations=a["pgd"]["max_iterations"], threat_model=threat)


def _transform_corpus_cached(images: torch.Tensor, spec: DefenseSpec, seed: int,
                             cache_dir: Path) -> torch.Tensor:
    key = config_hash({"spec": spec.spec_hash_parts(), "seed": seed,
                       "corpus": array_content_hash(images.numpy())})
    path = cache_dir / "transforms" / f"{key}.npz"
    if path.is_file():
        return torch.from_numpy(np.load(path)["images"])
    out = apply_transform(images, spec, seed=seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, images=out.numpy())
    return out


def build_defense_suite(ws: Workspace, splits: dict[str, LabeledDataset]
                        ) -> tuple[FrameworkState, EvaluationContext]:
    """Run the training framework, the surrogate, and the paired classifiers."""
    cfg = ws.config
    state = run_framework(splits["train"], splits["validation"], gan_config_from(cfg),
                          recon_config_from(cfg), ws.state_dir, framework_config_from(cfg))

    ccfg = cfg["classifier"]
    surrogate_path = ws.state_dir / "surrogate.pt"
    if surrogate_path.is_file():
        surrogate, _ = load_checkpoint(surrogate_path)
    else:
        logger.info("training transfer surrogate (seed %d)", ccfg["surrogate_seed"])
        surrogate = train_classifier(splits["train"], splits["validation"], ccfg["epochs"],
                                     ccfg["surrogate_seed"], ccfg["learning_rate"],
                                     ccfg["batch_size"])
        save_checkpoint(surrogate, surrogate_path, metadata={"seed": ccfg["surrogate_seed"]})

    dcfg = cfg["defenses"]
    param_kwargs = {"sigma": dcfg["gaussian_sigma"], "quality": dcfg["jpeg_quality"],
                    "bit_depth": dcfg["feature_squeeze_bit_depth"],
                    "window": dcfg["median_window"]}
    specs: dict[str, DefenseSpec] = {}
    for i, kind in enumerate(BASELINE_KINDS):
        path = ws.state_dir / f"defense_{kind.value}.pt"
        if path.is_file():
            paired, _ = load_checkpoint(path)
        else:
            logger.info("training paired classifier for %s", kind.value)
            spec_plain = DefenseSpec(kind=kind, **param_kwargs)
            train_t = LabeledDataset(
                _transform_corpus_cached(splits["train"].images, spec_plain,
                                         cfg["seed"], ws.cache_dir),
                splits["train"].labels.clone(), RangeTag.UNIT, "train",
                splits["train"].provenance)
            val_t = LabeledDataset(
                _transform_corpus_cached(splits["validation"].images, spec_plain,
                                         cfg["seed"] + 1, ws.cache_dir),
                splits["validation"].labels.clone(), RangeTag.UNIT, "validation",
                splits["validation"].provenance)
            paired = train_classifier(train_t, val_t, ccfg["epochs"],
                                      ccfg["seed"] + 10 + i, ccfg["learning_rate"],
                                      ccfg["batch_size"])
            save_checkpoint(paired, path, metadata={"defense": kind.value})
        specs[kind.value] = DefenseSpec(kind=kind, paired_classifier=paired, **param_kwargs)

    specs[DefenseKind.AR_GAN.value] = DefenseSpec(
        kind=DefenseKind.AR_GAN, paired_classifier=state.classifier_2,
        generator=state.generator_best, recon_config=recon_config_from(cfg), **param_kwargs)

    ctx = EvaluationContext(defense_specs=specs, surrogate_classifier=surrogate,
                            seed=cfg["seed"], cache=AdversarialCache(ws.cache_dir),
                            delay_sample=cfg["evaluation"]["delay_sample"])
    return state, ctx


def _eval_set(ws: Workspace, splits: dict[str, LabeledDataset], subset_key: str
              ) -> LabeledDataset:
    test = splits["test"]
    n = ws.config["evaluation"][subset_key]
    if n is not None and n < len(test):
        return test.subset(range(n))
    return test


def run_attack_stage(ws: Workspace, splits: dict[str, LabeledDataset],
                     state: FrameworkState, ctx: EvaluationContext) -> list[Path]:
    """Craft adversarial archives against the deployed classifier.

    White-box sets target classifier_2 directly on the raw input; black-box
    sets are crafted on the surrogate and scored by transfer. Everything also
    lands in the adversarial cache, so later evaluation reuses it.
    """
    cfg = ws.config
    test = _eval_set(ws, splits, "eval_subset").to_range(RangeTag.UNIT)
    written = []
    for family in cfg["evaluation"]["families"]:
        for threat in (ThreatModel.WHITE_BOX, ThreatModel.BLACK_BOX):
            attack = attack_config_for(cfg, family, threat)
            if threat == ThreatModel.WHITE_BOX:
                result = run_attack(test.images, test.labels, state.classifier_2, attack)
                craft_adversarial_set(test.images, test.labels, attack,
                                      state.classifier_2, ctx.cache)
            else:
                result = black_box_attack(test.images, test.labels,
                                          ctx.surrogate_classifier, state.classifier_2,
                                          attack)
                craft_adversarial_set(test.images, test.labels, attack,
                                      ctx.surrogate_classifier, ctx.cache)
            adv_dir = ws.attacks_dir / threat.value / AttackFamily(family).value
            for name in CLASS_NAMES:
                (adv_dir / name).mkdir(parents=True, exist_ok=True)
            entries = []
            for i in range(len(test)):
                cls = CLASS_NAMES[int(test.labels[i])]
                rel = f"{cls}/{i:05d}.png"
                arr = (result.adversarial[i].numpy().transpose(1, 2, 0) * 255.0
                       ).round().astype(np.uint8)
                Image.fromarray(arr).save(adv_dir / rel)
                entries.append({"file": rel, "label": cls,
                                "delta_l2": float(result.perturbation_l2[i]),
                                "delta_linf": float(result.perturbation_linf[i]),
                                "success": bool(result.success[i])})
            manifest = {
                "family": AttackFamily(family).value,
                "threat_model": threat.value,
                "epsilon": attack.epsilon,
                "config_hash": ws.hash,
                "success_rate": result.success_rate,
                "note": "success = prediction change under the deployed classifier "
                        "on the raw adversarial image",
                "images": entries,
            }
            path = adv_dir / "attack_manifest.json"
            with open(path, "w") as f:
                json.dump(manifest, f, indent=2)
            written.append(path)
            logger.info("attack %s/%s: success rate %.3f", threat.value, family,
                        result.success_rate)
    return written


def _write_eval_artifact(ws: Workspace, name: str, payload: dict) -> Path:
    ws.eval_dir.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": ws.hash, **payload}
    path = ws.eval_dir / f"{name}.json"
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


def _bare_classifier_scenarios(ws: Workspace, test: LabeledDataset,
                               state: FrameworkState, ctx: EvaluationContext) -> dict:
    """Undefended-classifier numbers used as the comparison floor."""
    unit = test.to_range(RangeTag.UNIT)
    images, labels = unit.images, unit.labels
    clean_preds = state.classifier_1.predict(images)
    out = {"clean_accuracy": float((clean_preds == labels).float().mean()),
           "n_images": len(unit), "attacks": {}}
    for family in ws.config["evaluation"]["families"]:
        white = attack_config_for(ws.config, family, ThreatModel.WHITE_BOX)
        adv_white, _ = craft_adversarial_set(images, labels, white,
                                             state.classifier_1, ctx.cache)
        black = attack_config_for(ws.config, family, ThreatModel.BLACK_BOX)
        adv_black, _ = craft_adversarial_set(images, labels, black,
                                             ctx.surrogate_classifier, ctx.cache)
        with torch.no_grad():
            pw = state.classifier_1.predict(adv_white)
            pb = state.classifier_1.predict(adv_black)
        out["attacks"][AttackFamily(family).value] = {
            "white_accuracy": float((pw == labels).float().mean()),
            "black_accuracy": float((pb == labels).float().mean()),
            "white_success_rate": float((pw != clean_preds).float().mean()),
            "black_success_rate": float((pb != clean_preds).float().mean()),
        }
    return out


def run_evaluate(ws: Workspace, splits: dict[str, LabeledDataset],
                 state: FrameworkState, ctx: EvaluationContext) -> list[Path]:
    """Produce the clean / black-box / white-box comparison artifacts."""
    cfg = ws.config
    test = _eval_set(ws, splits, "eval_subset")
    written = []

    bare = _bare_classifier_scenarios(ws, test, state, ctx)
    written.append(_write_eval_artifact(ws, "bare_classifier", bare))

    for kind in DEFENSE_ORDER:
        t0 = time.perf_counter()
        outcome = evaluate_defense(ctx.spec(kind), None, test, ctx)
        written.append(_write_eval_artifact(ws, f"table2_{kind}", outcome.as_dict()))
        logger.info("table2 %s: acc %.4f (%.1fs)", kind, outcome.metrics.accuracy,
                    time.perf_counter() - t0)

    for table, threat in (("table3", ThreatModel.BLACK_BOX),
                          ("table4", ThreatModel.WHITE_BOX)):
        for family in cfg["evaluation"]["families"]:
            attack = attack_config_for(cfg, family, threat)
            for kind in DEFENSE_ORDER:
                t0 = time.perf_counter()
                outcome = evaluate_defense(ctx.spec(kind), attack, test, ctx)
                written.append(_write_eval_artifact(
                    ws, f"{table}_{AttackFamily(family).value}_{kind}", outcome.as_dict()))
                logger.info("%s %s/%s: acc %.4f (%.1fs)", table, family, kind,
                            outcome.metrics.accuracy, time.perf_counter() - t0)
    return written


def run_sweep(ws: Workspace, splits: dict[str, LabeledDataset],
              ctx: EvaluationContext) -> Path:
    """Perturbation-magnitude sweep over the configured families and threat models."""
    cfg = ws.config
    test = _eval_set(ws, splits, "sweep_subset")
    base_attacks = {f: attack_config_for(cfg, f) for f in cfg["evaluation"]["sweep_families"]}
    curves = epsilon_sweep(cfg["evaluation"]["sweep_families"],
                           cfg["evaluation"]["sweep_threat_models"],
                           DEFENSE_ORDER, cfg["epsilon_grid"], test, ctx,
                           base_attacks=base_attacks)
    payload = {"curves": [{"attack_family": c.attack_family, "threat_model": c.threat_model,
                           "defense": c.defense, "points": c.points} for c in curves]}
    path = _write_eval_artifact(ws, "sweep_curves", payload)
    write_sweep_csvs(curves, ws.eval_dir / "sweep")
    return path


def run_sensitivity(ws: Workspace, splits: dict[str, LabeledDataset],
                    state: FrameworkState) -> Path | None:
    cfg = ws.config["evaluation"]
    if not cfg["sensitivity_l_grid"] or not cfg["sensitivity_r_grid"]:
        return None
    test = splits["test"]
    if cfg["sensitivity_subset"] < len(test):
        test = test.subset(range(cfg["sensitivity_subset"]))
    rows = sensitivity_sweep(test, state.generator_best, state.classifier_2,
                             cfg["sensitivity_l_grid"], cfg["sensitivity_r_grid"],
                             base_config=recon_config_from(ws.config),
                             csv_path=ws.eval_dir / "sensitivity.csv")
    return _write_eval_artifact(ws, "sensitivity", {"rows": rows})


def _load_eval_artifact(ws: Workspace, name: str) -> dict:
    path = ws.eval_dir / f"{name}.json"
    if not path.is_file():
        raise StageFailure(f"missing evaluation artifact {path}; run 'evaluate' first")
    with open(path) as f:
        payload = json.load(f)
    if payload.get("config_hash") != ws.hash:
        raise StageFailure(
            f"evaluation artifact {path} was produced by config "
            f"{payload.get('config_hash', '?')[:12]}..., refusing mixed-hash report")
    return payload


def write_report(ws: Workspace) -> Path:
    """Collate evaluation artifacts into the report bundle."""
    cfg = ws.config
    report = ws.report_dir
    report.mkdir(parents=True, exist_ok=True)

    table2 = [_load_eval_artifact(ws, f"table2_{kind}") for kind in DEFENSE_ORDER]
    write_clean_table(table2, report / "table2.csv")
    tables_md = {"Unperturbed images": table2}

    for table, title in (("table3", "Black-box adversarial images"),
                         ("table4", "White-box adversarial images")):
        rows = []
        for family in cfg["evaluation"]["families"]:
            for kind in DEFENSE_ORDER:
                rows.append(_load_eval_artifact(
                    ws, f"{table}_{AttackFamily(family).value}_{kind}"))
        write_attack_table(rows, report / f"{table}.csv")
        tables_md[title] = rows

    sweep_path = ws.eval_dir / "sweep_curves.json"
    if sweep_path.is_file():
        payload = _load_eval_artifact(ws, "sweep_curves")
        from .evaluation import SweepCurve
        curves = [SweepCurve(c["attack_family"], c["threat_model"], c["defense"],
                             [tuple(p) for p in c["points"]]) for c in payload["curves"]]
        write_sweep_csvs(curves, report)

    sens_path = ws.eval_dir / "sensitivity.csv"
    if sens_path.is_file():
        (report / "sensitivity.csv").write_bytes(sens_path.read_bytes())

    with open(report / "tables.md", "w") as f:
        f.write(render_markdown_tables(tables_md))

    bare = _load_eval_artifact(ws, "bare_classifier")
    meta = {
        "config_hash": ws.hash,
        "seed": cfg["seed"],
        "jpeg_codec": JPEG_CODEC_ID,
        "package_version": __version__,
        "bare_classifier": bare,
        "reference_operating_point": {
            "gradient_steps": REFERENCE_OPERATING_POINT[0],
            "random_restarts": REFERENCE_OPERATING_POINT[1],
            "work_units": REFERENCE_OPERATING_POINT[0] * REFERENCE_OPERATING_POINT[1],
            "reference_delay_seconds": REFERENCE_DELAY_SECONDS,
            "note": "reference delay is reported metadata, never asserted",
        },
    }
    with open(report / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return report


def reproduce(ws: Workspace) -> Path:
    """Chain every stage: data, framework, attacks, evaluation, sweep, report."""
    t0 = time.perf_counter()
    splits = prepare_dataset(ws)
    state, ctx = build_defense_suite(ws, splits)
    logger.info("models ready after %.1fs", time.perf_counter() - t0)
    run_attack_stage(ws, splits, state, ctx)
    run_evaluate(ws, splits, state, ctx)
    run_sweep(ws, splits, ctx)
    run_sensitivity(ws, splits, state)
    report = write_report(ws)
    logger.info("reproduction finished in %.1fs", time.perf_counter() - t0)
    return report
