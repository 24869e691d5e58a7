"""Experiment stages and the full pipeline, writing artifacts into per-run directories.

Every invocation gets a fresh ``run-NNN`` directory under the output root, so earlier
artifacts are never rewritten. Report JSON carries no paths or timestamps, which keeps
reruns with the same config and seed byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import attack as atk
from . import defense as dfn
from .config import ExperimentConfig, ModelConfig
from .data import LabeledData, Splits, load_dataset
from .distill import DistillConfig, save_ensemble, train_ensemble
from .errors import ConfigurationError
from .partition import SplitPlan, split_dirichlet, split_overlap
from .smaml import LambdaScheduler, OptimizerSchedule, generate_natural_trigger
from .training import Classifier, TrainConfig, load_classifier, save_classifier, train_classifier
from .trigger import TriggerArtifact, apply_trigger, load_trigger, save_trigger
from .zoo import ModelSpec

log = logging.getLogger(__name__)


def configure_numerics(verify_fp64: bool = False):
    """float64 + single-threaded deterministic kernels in verification mode, float32 otherwise."""
    torch.set_default_dtype(torch.float64 if verify_fp64 else torch.float32)
    torch.use_deterministic_algorithms(True)
    if verify_fp64:
        torch.set_num_threads(1)


def new_run_dir(root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    taken = {p.name for p in root.iterdir()}
    i = 1
    while f"run-{i:03d}" in taken:
        i += 1
    path = root / f"run-{i:03d}"
    path.mkdir()
    return path


def write_json(path: Path, payload):
    if path.exists():
        raise FileExistsError(f"refusing to overwrite {path}")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def write_csv(path: Path, header, rows):
    if path.exists():
        raise FileExistsError(f"refusing to overwrite {path}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# config -> library objects ---------------------------------------------------------------


def train_config(section, seed) -> TrainConfig:
    return TrainConfig(learning_rate=section.learning_rate, momentum=section.momentum,
                       weight_decay=section.weight_decay, epochs=section.epochs,
                       batch_size=section.batch_size, seed=seed)


def distill_config(cfg: ExperimentConfig) -> DistillConfig:
    d = cfg.distill
    return DistillConfig(num_substitutes=len(cfg.substitutes), temperature=d.temperature, alpha=d.alpha,
                         train=train_config(d.train, cfg.seed), scale_kl_by_h2=d.scale_kl_by_h2)


def optimizer_schedule(cfg: ExperimentConfig) -> OptimizerSchedule:
    s = cfg.schedule
    return OptimizerSchedule(max_epochs=s.max_epochs, iters_per_epoch=s.iters_per_epoch,
                             inner_steps=s.inner_steps, trigger_lr=s.trigger_lr, batch_size=s.batch_size,
                             joint=s.joint, keep_passing=s.keep_passing)


def lambda_scheduler(cfg: ExperimentConfig) -> LambdaScheduler:
    s = cfg.lambda_
    return LambdaScheduler(lam=s.initial, target_asr=s.target_asr, up_factor=s.up_factor,
                           down_factor=s.down_factor, patience=s.patience)


def model_spec(m: ModelConfig, k: int) -> ModelSpec:
    return ModelSpec(m.family, k, width=m.width, depth=m.depth)


@dataclass
class Workspace:
    """Loaded data for one experiment: dataset splits plus the attacker/owner training shares."""

    splits: Splits
    attacker: LabeledData
    owner: LabeledData
    plan: SplitPlan


def load_workspace(cfg: ExperimentConfig) -> Workspace:
    splits = load_dataset(cfg.dataset.name, seed=cfg.seed, **cfg.dataset.loader_kwargs())
    plan = make_split(cfg, splits.train)
    return Workspace(splits, splits.train.subset(plan.attacker_indices), splits.train.subset(plan.user_indices), plan)


def make_split(cfg: ExperimentConfig, train: LabeledData) -> SplitPlan:
    s = cfg.split
    if s.mode == "overlap":
        return split_overlap(len(train), s.attacker_range, s.user_range, cfg.seed)
    if s.mode == "dirichlet":
        return split_dirichlet(train.y.numpy(), s.alpha, 2, cfg.seed)
    everything = list(range(len(train)))
    return SplitPlan(everything, everything, "none", {}, cfg.seed)


# stages ----------------------------------------------------------------------------------


def stage_train_substitutes(cfg: ExperimentConfig, ws: Workspace, run_dir: Path) -> dict:
    k = ws.splits.spec.num_classes
    specs = [model_spec(m, k) for m in cfg.substitutes]
    dcfg = distill_config(cfg)
    state = train_ensemble(specs, ws.attacker, ws.splits.val, dcfg, ws.splits.spec)
    save_ensemble(state, run_dir / "ensemble", dcfg)
    report = {"val_accuracy_history": state.val_history, "tm_history": state.tm_history}
    write_json(run_dir / "substitutes_report.json", report)
    return report


def generate_trigger(cfg: ExperimentConfig, ws: Workspace, target_class: int, checkpoint_dir=None):
    k = ws.splits.spec.num_classes
    specs = [model_spec(m, k) for m in cfg.substitutes]
    return generate_natural_trigger(ws.attacker, ws.splits.val, specs, ws.splits.spec, distill_config(cfg),
                                    optimizer_schedule(cfg), target_class, cfg.attack.norm_type, seed=cfg.seed,
                                    lam=lambda_scheduler(cfg), checkpoint_dir=checkpoint_dir)


def stage_gen_trigger(cfg: ExperimentConfig, ws: Workspace, run_dir: Path) -> TriggerArtifact:
    artifact, state, runlog = generate_trigger(cfg, ws, cfg.attack.target_class, run_dir / "partial")
    save_trigger(artifact, run_dir / "trigger.npz")
    save_ensemble(state, run_dir / "ensemble", distill_config(cfg))
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "split": {"mode": ws.plan.mode, "params": ws.plan.params,
                  "attacker_size": len(ws.attacker), "owner_size": len(ws.owner)},
        "epoch_ensemble_asr": runlog.epoch_asr,
        "epoch_mask_l1": runlog.epoch_mask_l1,
        "teacher_history": runlog.teacher_history,
        "val_accuracy_history": runlog.val_accuracy_history,
        "lambda_history": artifact.provenance["lambda_history"],
        "ensemble_asr": artifact.provenance["ensemble_asr"],
        "returned_epoch": artifact.provenance["returned_epoch"],
    }
    write_json(run_dir / "run_manifest.json", manifest)
    return artifact


def obtain_targets(cfg: ExperimentConfig, ws: Workspace, run_dir: Path | None) -> dict:
    """Train (on the owner's share) or load every configured target model."""
    k = ws.splits.spec.num_classes
    targets = {}
    for j, m in enumerate(cfg.targets):
        if m.checkpoint:
            model = load_classifier(m.checkpoint)
            if tuple(model.dataset.input_shape) != tuple(ws.splits.spec.input_shape):
                raise ConfigurationError(f"target checkpoint {m.checkpoint} has the wrong input shape")
        else:
            tc = train_config(cfg.target_training, cfg.seed + 1000 + j)
            model = train_classifier(model_spec(m, k), ws.owner, tc, val=ws.splits.val, dataset=ws.splits.spec)
        targets[m.model_id] = model
    if run_dir is not None:
        (run_dir / "targets").mkdir(exist_ok=True)
        for model_id, model in targets.items():
            save_classifier(model, run_dir / "targets" / f"{model_id}.npz")
    return targets


def stage_eval_attack(cfg: ExperimentConfig, ws: Workspace, run_dir: Path, artifact: TriggerArtifact,
                      targets: dict, substitutes=None) -> atk.AttackReport:
    test = ws.splits.test
    report = atk.evaluate_targets(targets, test, artifact.trigger, cfg.attack.transparency_grid,
                                  seeds={"experiment": cfg.seed})
    report.extra["ensemble_asr"] = artifact.provenance.get("ensemble_asr")
    if cfg.attack.uap.enabled:
        u = cfg.attack.uap
        uap_cfg = atk.UapConfig(u.epsilon, u.steps, u.step_size, artifact.trigger.target_class)
        if substitutes is None:
            raise ConfigurationError("UAP baseline needs the trained substitutes")
        delta = atk.uap_baseline(substitutes[0], ws.attacker, uap_cfg)
        report.extra["uap"] = {
            "epsilon": u.epsilon, "steps": u.steps, "step_size": u.step_size,
            "linf": float(delta.abs().max()),
            "asr": {mid: atk.perturbation_success_rate(model, test, delta, uap_cfg.target_class)
                    for mid, model in sorted(targets.items())},
        }
    report.write(run_dir)
    return report


def stage_multi(cfg: ExperimentConfig, ws: Workspace, run_dir: Path, targets: dict) -> dict:
    test = ws.splits.test
    out_dir = run_dir / "triggers"
    out_dir.mkdir(exist_ok=True)

    def generate(cls):
        artifact, _, _ = generate_trigger(cfg, ws, cls)
        save_trigger(artifact, out_dir / f"class_{cls}.npz")
        return artifact

    def evaluate(artifact):
        return {f"asr[{mid}]": atk.attack_success_rate(m, test, artifact.trigger) for mid, m in sorted(targets.items())}

    result = atk.multi_trigger_campaign(generate, cfg.attack.multi_targets, evaluate)
    payload = {"rows": result["rows"], "failures": {str(k): v for k, v in result["failures"].items()}}
    write_json(run_dir / "multi_report.json", payload)
    if result["rows"]:
        header = sorted(result["rows"][0])
        write_csv(run_dir / "multi_report.csv", header, [[r[h] for h in header] for r in result["rows"]])
    return payload


def stage_eval_defense(cfg: ExperimentConfig, ws: Workspace, run_dir: Path, artifact: TriggerArtifact,
                       targets: dict) -> dict:
    trig = artifact.trigger
    test, val = ws.splits.test, ws.splits.val
    d = cfg.defenses
    report = {}

    def asr(model):
        return atk.attack_success_rate(model, test, trig)

    for model_id, model in sorted(targets.items()):
        entry = {}
        if d.prune.enabled:
            entry["prune"] = dfn.prune_sweep(model, test, d.prune.ratios, d.prune.method, ws.owner, asr)
        if d.fine_tune.enabled:
            tuned = dfn.fine_tune(model, ws.owner, d.fine_tune.clean_fraction, d.fine_tune.epochs,
                                  d.fine_tune.learning_rate, seed=cfg.seed)
            entry["fine_tune"] = {"clean_accuracy": atk.evaluate_accuracy(tuned, test), "asr": asr(tuned)}
        if d.nad.enabled:
            student = dfn.nad_distill(model, ws.owner, d.nad.clean_fraction, d.nad.beta, d.nad.epochs,
                                      d.nad.learning_rate, seed=cfg.seed)
            entry["nad"] = {"clean_accuracy": atk.evaluate_accuracy(student, test), "asr": asr(student)}
        triggered = apply_trigger(test.without_class(trig.target_class).x, trig)
        if d.strip.enabled:
            # the owner calibrates on all clean data it holds; the test inputs stay disjoint
            holdout = torch.cat([ws.owner.x, val.x])
            entry["strip"] = dfn.strip_detect(model, triggered, holdout, d.strip.n_overlays, seed=cfg.seed).to_dict()
        if d.beatrix.enabled:
            bcfg = dfn.BeatrixConfig(tuple(d.beatrix.gram_orders), d.beatrix.eta, tap_layer=d.beatrix.tap_layer)
            entry["beatrix"] = dfn.beatrix_detect(model, triggered, val, bcfg).to_dict()
        report[model_id] = entry
    write_json(run_dir / "defense_report.json", report)
    _write_defense_csvs(run_dir, report)
    return report


def _write_defense_csvs(run_dir: Path, report: dict):
    prune_rows, repair_rows, strip_rows, beatrix_rows = [], [], [], []
    for mid, entry in sorted(report.items()):
        for row in entry.get("prune", []):
            prune_rows.append([mid, row["ratio"], f"{row['clean_accuracy']:.4f}", f"{row['asr']:.4f}"])
        for name in ("fine_tune", "nad"):
            if name in entry:
                repair_rows.append([mid, name, f"{entry[name]['clean_accuracy']:.4f}", f"{entry[name]['asr']:.4f}"])
        if "strip" in entry:
            s = entry["strip"]
            strip_rows.append([mid, f"{s['mean_clean']:.4f}", f"{s['std_clean']:.4f}",
                               f"{s['threshold']:.4f}", f"{s['p_escape']:.4f}"])
        if "beatrix" in entry:
            b = entry["beatrix"]
            for cls, index in sorted(b["anomaly_indices"].items()):
                beatrix_rows.append([mid, cls, f"{index:.4f}", int(int(cls) in b["flagged"])])
    if prune_rows:
        write_csv(run_dir / "prune_report.csv", ["model", "ratio", "CA", "ASR"], prune_rows)
    if repair_rows:
        write_csv(run_dir / "repair_report.csv", ["model", "defense", "CA", "ASR"], repair_rows)
    if strip_rows:
        write_csv(run_dir / "strip_report.csv", ["model", "Mean_clean", "Std_clean", "Threshold", "P_escape"], strip_rows)
    if beatrix_rows:
        write_csv(run_dir / "beatrix_report.csv", ["model", "class", "anomaly_index", "flagged"], beatrix_rows)


def evaluate_checks(cfg: ExperimentConfig, artifact: TriggerArtifact, report: atk.AttackReport | None) -> dict:
    c = cfg.checks
    checks = {}
    if c.min_ensemble_asr is not None:
        value = artifact.provenance.get("ensemble_asr")
        checks["ensemble_asr"] = {"value": value, "min": c.min_ensemble_asr,
                                  "passed": value is not None and value >= c.min_ensemble_asr}
    if report is not None:
        for row in report.rows:
            if c.min_target_asr is not None:
                checks[f"target_asr[{row.model_id}]"] = {"value": row.asr, "min": c.min_target_asr,
                                                         "passed": row.asr >= c.min_target_asr}
            if c.beat_baseline:
                checks[f"beats_baseline[{row.model_id}]"] = {"value": row.asr, "baseline": row.baseline,
                                                             "passed": row.asr > row.baseline}
    return {"checks": checks, "passed": all(v["passed"] for v in checks.values())}


def run_experiment(cfg: ExperimentConfig, out_root=None, plots: bool = True) -> tuple[Path, dict]:
    """Full pipeline: trigger generation, target evaluation, optional campaign and defenses.

    Returns the run directory and the check summary. A failing stage leaves its partial
    artifacts plus ``failure.json`` behind and re-raises.
    """
    cfg.validate()
    run_dir = new_run_dir(out_root or cfg.output_dir)
    (run_dir / "config.yaml").write_text(cfg.dump())
    stage = "load-data"
    try:
        ws = load_workspace(cfg)
        stage = "gen-trigger"
        artifact = stage_gen_trigger(cfg, ws, run_dir)
        stage = "targets"
        targets = obtain_targets(cfg, ws, run_dir)
        stage = "eval-attack"
        substitutes = None
        if cfg.attack.uap.enabled:
            from .distill import load_ensemble
            substitutes = load_ensemble(run_dir / "ensemble").models
        report = stage_eval_attack(cfg, ws, run_dir, artifact, targets, substitutes)
        if cfg.attack.multi_targets:
            stage = "multi-trigger"
            stage_multi(cfg, ws, run_dir, targets)
        if cfg.defenses.any_enabled():
            stage = "eval-defense"
            stage_eval_defense(cfg, ws, run_dir, artifact, targets)
        summary = evaluate_checks(cfg, artifact, report)
        write_json(run_dir / "checks.json", summary)
        if plots:
            stage = "plot"
            from .plots import emit_plots
            emit_plots(run_dir)
    except Exception as exc:
        write_json(run_dir / "failure.json", {"stage": stage, "error": f"{type(exc).__name__}: {exc}",
                                              "traceback": traceback.format_exc()})
        raise
    return run_dir, summary


def load_artifact_dir(path) -> tuple[TriggerArtifact, dict]:
    """Trigger (and any saved targets) from an earlier run directory."""
    path = Path(path)
    if not (path / "trigger.npz").exists():
        raise FileNotFoundError(f"{path} has no trigger.npz")
    artifact = load_trigger(path / "trigger.npz")
    targets = {}
    if (path / "targets").is_dir():
        for f in sorted((path / "targets").glob("*.npz")):
            targets[f.stem] = load_classifier(f)
    return artifact, targets
