"""Config-driven experiment runner and command-line entry point.

One experiment is: synthesize data, poison it, train, select the dropout
rate, run detectors, score them.  Every random draw descends from the
config's global seed through labeled sub-seeds, artifacts live in a
timestamp-free seed-named directory, and re-running a config reproduces the
metric files byte for byte.
"""
import argparse
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attacks, data, detect, nets, report, uncertainty
from .detect import DetectionConfig, SelectionPolicy
from .nets import AdaptiveAttackConfig, ArchSpec, DropoutConfig, TrainConfig

log = logging.getLogger(__name__)

DETECTOR_NAMES = ("psbd", "mc_dropout", "strip", "scp", "spectral_signature")
STAGES = ("synth", "poison", "train", "select", "detect", "report")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def seed_for(global_seed, label):
    """Labeled sub-seed: stable integer derived from the global seed."""
    ss = np.random.SeedSequence([int(global_seed),
                                 zlib.crc32(label.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


@dataclass
class DatasetParams:
    per_class: int = 500
    class_count: int = 10
    side: int = 32
    val_pool_per_class: int = 100
    test_per_class: int = 100
    val_fraction: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0,1)")


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    output_dir: str = "runs"
    dataset: DatasetParams = field(default_factory=DatasetParams)
    arch: ArchSpec = field(default_factory=ArchSpec)
    poison: attacks.PoisonSpec = None  # None -> benign run
    train: TrainConfig = field(default_factory=TrainConfig)
    selection: SelectionPolicy = field(default_factory=SelectionPolicy)
    detection: DetectionConfig = field(
        default_factory=lambda: DetectionConfig(DropoutConfig(p=None)))
    detectors: tuple = ("psbd",)
    detector_params: dict = field(default_factory=dict)
    adaptive: AdaptiveAttackConfig = None

    def __post_init__(self):
        self.detectors = tuple(self.detectors)
        unknown = set(self.detectors) - set(DETECTOR_NAMES)
        if unknown:
            raise ValueError(f"unknown detectors: {sorted(unknown)}")

    def to_json(self):
        doc = {"name": self.name, "seed": self.seed,
               "output_dir": self.output_dir,
               "dataset": asdict(self.dataset),
               "arch": self.arch.to_json(),
               "poison": None if self.poison is None else self.poison.to_json(),
               "train": _train_to_json(self.train),
               "selection": {"p_grid": list(self.selection.p_grid),
                             "sigma_target": self.selection.sigma_target,
                             "k_select": self.selection.k_select},
               "detection": {"dropout": asdict(self.detection.dropout),
                             "threshold_percentile":
                                 self.detection.threshold_percentile},
               "detectors": list(self.detectors),
               "detector_params": self.detector_params,
               "adaptive": None if self.adaptive is None else
               {"alpha": self.adaptive.alpha,
                "ada_interval": self.adaptive.ada_interval,
                "psu_config": asdict(self.adaptive.psu_config)}}
        return doc

    @classmethod
    def from_json(cls, doc):
        poison = doc.get("poison")
        adaptive = doc.get("adaptive")
        det = doc.get("detection", {})
        return cls(
            name=doc["name"], seed=doc["seed"],
            output_dir=doc.get("output_dir", "runs"),
            dataset=DatasetParams(**doc.get("dataset", {})),
            arch=ArchSpec.from_json(doc["arch"]) if "arch" in doc
            else ArchSpec(),
            poison=None if poison is None
            else attacks.PoisonSpec.from_json(poison),
            train=TrainConfig(**_tupled(doc.get("train", {}),
                                        "decay_epochs", "checkpoint_epochs")),
            selection=SelectionPolicy(**_tupled(doc.get("selection", {}),
                                                "p_grid")),
            detection=DetectionConfig(
                DropoutConfig(**det.get("dropout", {"p": None})),
                det.get("threshold_percentile", 25.0)),
            detectors=tuple(doc.get("detectors", ("psbd",))),
            detector_params=doc.get("detector_params", {}),
            adaptive=None if adaptive is None else AdaptiveAttackConfig(
                alpha=adaptive["alpha"],
                ada_interval=adaptive.get("ada_interval", 50),
                psu_config=DropoutConfig(
                    **adaptive.get("psu_config", {"p": 0.5}))))


def _train_to_json(t):
    d = asdict(t)
    d["decay_epochs"] = list(t.decay_epochs)
    d["checkpoint_epochs"] = list(t.checkpoint_epochs)
    return d


def _tupled(doc, *keys):
    doc = dict(doc)
    for k in keys:
        if k in doc and doc[k] is not None:
            doc[k] = tuple(doc[k])
    return doc


def load_config(path_or_name):
    """Read a config from a path, or from the bundled set by bare name."""
    path = str(path_or_name)
    if not os.path.exists(path) and "/" not in path:
        from importlib import resources
        name = path if path.endswith(".json") else path + ".json"
        ref = resources.files("shiftscan.configs").joinpath(name)
        if ref.is_file():
            return ExperimentConfig.from_json(json.loads(ref.read_text()))
    with open(path) as f:
        return ExperimentConfig.from_json(json.load(f))


def _resolve_seeds(cfg):
    """Fill every null nested seed from the global seed via labels."""
    g = cfg.seed
    if cfg.poison is not None and cfg.poison.seed is None:
        cfg.poison.seed = seed_for(g, "poison")
    if cfg.train.seed is None:
        cfg.train.seed = seed_for(g, "train")
    if cfg.detection.dropout.seed is None:
        cfg.detection.dropout.seed = seed_for(g, "detect-masks")
    if cfg.adaptive is not None and cfg.adaptive.psu_config.seed is None:
        cfg.adaptive.psu_config.seed = seed_for(g, "ada-psu")
    return cfg


def _attack_name(cfg):
    if cfg.poison is None:
        return "benign"
    kind = cfg.poison.trigger.kind
    return f"adaptive_{kind}" if cfg.adaptive is not None else kind


def _run_detector(name, model, suspect, clean_val, cfg, selected_p):
    params = dict(cfg.detector_params.get(name, {}))
    if name == "psbd":
        dc = DetectionConfig(
            DropoutConfig(selected_p, cfg.detection.dropout.k,
                          cfg.detection.dropout.seed,
                          cfg.detection.dropout.per_sample,
                          cfg.detection.dropout.rescale),
            cfg.detection.threshold_percentile)
        return detect.psbd_detect(model, suspect, clean_val, dc)
    if name == "mc_dropout":
        # the baseline has no adaptive rate selection; it runs at the
        # conventional fixed rate unless the config overrides it
        dc = DetectionConfig(
            DropoutConfig(params.get("p", 0.5),
                          max(params.get("k", cfg.detection.dropout.k), 2),
                          seed_for(cfg.seed, "mc-masks"),
                          cfg.detection.dropout.per_sample,
                          cfg.detection.dropout.rescale),
            cfg.detection.threshold_percentile)
        return detect.mc_dropout_detect(model, suspect, clean_val, dc)
    if name == "strip":
        params.setdefault("seed", seed_for(cfg.seed, "strip"))
        params.setdefault("threshold_percentile",
                          cfg.detection.threshold_percentile)
        return detect.strip_detect(model, suspect, clean_val, **params)
    if name == "scp":
        params.setdefault("threshold_percentile",
                          cfg.detection.threshold_percentile)
        return detect.scp_detect(model, suspect, clean_val, **params)
    if name == "spectral_signature":
        return detect.spectral_signature_detect(model, suspect, **params)
    raise ValueError(f"unknown detector {name!r}")


def run_experiment(config, output_dir=None):
    """Execute the full pipeline; returns the run directory path."""
    cfg = _resolve_seeds(config)
    out_root = output_dir or cfg.output_dir
    run_dir = os.path.join(out_root, f"{cfg.name}-seed{cfg.seed}")
    os.makedirs(run_dir, exist_ok=True)
    report.write_json(cfg.to_json(), os.path.join(run_dir, "config.json"))
    stage = "synth"
    try:
        dp = cfg.dataset
        train_clean = data.synth_dataset(seed_for(cfg.seed, "data-train"),
                                         dp.per_class, dp.class_count, dp.side)
        pool = data.synth_dataset(seed_for(cfg.seed, "data-pool"),
                                  dp.val_pool_per_class, dp.class_count,
                                  dp.side)
        test = data.synth_dataset(seed_for(cfg.seed, "data-test"),
                                  dp.test_per_class, dp.class_count, dp.side)
        clean_val, _ = data.split_validation(pool, dp.val_fraction,
                                             seed_for(cfg.seed, "split"),
                                             train_size=len(train_clean))

        stage = "poison"
        if cfg.poison is not None:
            poisoned = attacks.poison_dataset(train_clean, cfg.poison)
            suspect = poisoned.dataset
            truth = poisoned.backdoor_mask
            meta = cfg.poison.to_json()
            meta["backdoor_ids"] = suspect.ids[truth].tolist()
            meta["cover_ids"] = suspect.ids[poisoned.cover_mask].tolist()
            report.write_json(meta, os.path.join(run_dir, "poison_meta.json"))
        else:
            poisoned = None
            suspect = train_clean
            truth = np.zeros(len(suspect), dtype=bool)

        stage = "train"
        model0 = nets.build_model(cfg.arch, seed_for(cfg.seed, "model"))
        if cfg.adaptive is not None:
            ckpts = nets.train_adaptive_attacker(model0, suspect, cfg.train,
                                                 cfg.adaptive)
        else:
            ckpts = nets.train(model0, suspect, cfg.train)
        model = ckpts[-1]
        for ck in ckpts:
            nets.save_checkpoint(ck, os.path.join(
                run_dir, "checkpoints",
                "final" if ck is ckpts[-1] else f"epoch{ck.epoch}"))
        report.write_json({"loss_by_epoch": getattr(model, "history", [])},
                          os.path.join(run_dir, "training_log.json"))
        clean_acc = nets.evaluate(model, test)
        train_acc = nets.evaluate(model, suspect)
        asr = None
        if cfg.poison is not None:
            asr = nets.attack_success_rate(model, test, cfg.poison.trigger,
                                           cfg.poison.target_label)

        stage = "select"
        sel_seed = seed_for(cfg.seed, "select-masks")
        groups = {"clean_val": clean_val}
        if poisoned is not None:
            groups["clean_train"] = suspect.subset(np.flatnonzero(~truth))
            groups["backdoor"] = suspect.subset(np.flatnonzero(truth))
        else:
            groups["clean_train"] = suspect
        curves = detect.sigma_curves(model, groups, cfg.selection.p_grid,
                                     cfg.selection.k_select, sel_seed)
        n_ct = len(groups["clean_train"])
        if "backdoor" in groups:
            n_bd = len(groups["backdoor"])
            sigma_full = [(ct * n_ct + bd * n_bd) / (n_ct + n_bd)
                          for ct, bd in zip(curves["sigma"]["clean_train"],
                                            curves["sigma"]["backdoor"])]
        else:
            sigma_full = curves["sigma"]["clean_train"]
        selected_p, fallback = detect.apply_selection_rule(
            curves["p"], curves["sigma"]["clean_val"], sigma_full,
            cfg.selection)
        report.write_json(
            {"selected_p": selected_p, "fallback_used": fallback,
             "p_grid": curves["p"], "sigma_train": sigma_full,
             "sigma_val": curves["sigma"]["clean_val"],
             "k_select": cfg.selection.k_select,
             "sigma_target": cfg.selection.sigma_target},
            os.path.join(run_dir, "selection.json"))
        report.emit_curves(model, groups, cfg.selection.p_grid,
                           cfg.selection.k_select, run_dir, sel_seed,
                           selected_p=selected_p, curves=curves)

        stage = "detect"
        reports = {}
        for det_name in cfg.detectors:
            reports[det_name] = _run_detector(det_name, model, suspect,
                                              clean_val, cfg, selected_p)

        stage = "report"
        attack = _attack_name(cfg)
        pr = 0.0 if cfg.poison is None else cfg.poison.poison_ratio
        summary = {"name": cfg.name, "seed": cfg.seed, "attack": attack,
                   "clean_accuracy": clean_acc, "train_accuracy": train_acc,
                   "attack_success_rate": asr, "selected_p": selected_p,
                   "selection_fallback": fallback, "detectors": {}}
        stats_cfg = DropoutConfig(selected_p, cfg.detection.dropout.k,
                                  cfg.detection.dropout.seed,
                                  cfg.detection.dropout.per_sample,
                                  cfg.detection.dropout.rescale)
        base_probs, passes = uncertainty.dropout_pass_probs(
            model, suspect.images, stats_cfg,
            suspect.ids if stats_cfg.per_sample else None)
        rows = np.arange(len(suspect))
        base_cls = base_probs.argmax(axis=1)
        psu_tr = base_probs[rows, base_cls] \
            - passes[:, rows, base_cls].mean(axis=0)
        shift_counts = (passes.argmax(axis=2) != base_cls[None, :]).sum(axis=0)
        uncertainty.export_sample_stats(
            os.path.join(run_dir, "sample_stats.csv"), suspect.ids, base_cls,
            base_probs[rows, base_cls], psu_tr, shift_counts, truth)
        _, psu_val = uncertainty.psu_values(model, clean_val, stats_cfg)
        psu_groups = {"clean_train": psu_tr[~truth], "clean_val": psu_val}
        if truth.any():
            psu_groups["backdoor"] = psu_tr[truth]
        report.emit_psu_summary(psu_groups,
                                os.path.join(run_dir, "psu_summary.csv"))
        for det_name, rep in reports.items():
            det_dir = os.path.join(run_dir, "detectors", det_name)
            ms = report.compute_metrics(rep, truth, suspect.ids)
            detect.save_report(rep, det_dir, truth)
            report.write_json(report.metrics_doc(rep, ms, attack, pr),
                              os.path.join(det_dir, "metrics.json"))
            summary["detectors"][det_name] = {
                "tpr": ms.tpr, "fpr": ms.fpr, "auroc": ms.auroc,
                "T": rep.threshold, "p": rep.p}
        report.write_json(summary, os.path.join(run_dir, "run.json"))
        return run_dir
    except Exception as exc:
        report.write_json({"stage": stage, "error": str(exc)},
                          os.path.join(run_dir, "error.json"))
        raise StageError(stage, exc) from exc


def run_suite(configs, table_path):
    """Run several configs; aggregate an attack x detector metric table.
    Failures are recorded per config and the suite continues."""
    if len(configs) == 0:
        raise ValueError("suite needs at least one config")
    rows = []
    for cfg in configs:
        attack = _attack_name(cfg)
        try:
            run_dir = run_experiment(cfg)
        except StageError as exc:
            log.error("suite config %s failed: %s", cfg.name, exc)
            for det_name in cfg.detectors:
                rows.append({"attack": attack, "detector": det_name,
                             "error": exc.stage})
            continue
        with open(os.path.join(run_dir, "run.json")) as f:
            summary = json.load(f)
        for det_name in cfg.detectors:
            ms = summary["detectors"][det_name]
            rows.append({"attack": attack, "detector": det_name,
                         "tpr": ms["tpr"], "fpr": ms["fpr"],
                         "auroc": ms["auroc"], "p": ms["p"], "T": ms["T"]})
    os.makedirs(os.path.dirname(table_path) or ".", exist_ok=True)
    report.write_suite_table(rows, table_path)
    return table_path


def _trigger_from_args(args):
    params = {}
    if args.trigger == "patch":
        params = {"size": args.patch_size, "offset": args.patch_offset,
                  "parity": args.patch_parity}
    elif args.trigger == "blend":
        params = {"alpha": args.blend_alpha, "pattern_seed": args.pattern_seed}
    elif args.trigger == "warp":
        params = {"grid": args.warp_grid, "strength": args.warp_strength,
                  "seed": args.warp_seed}
    return attacks.TriggerSpec(args.trigger, params)


def _add_trigger_args(sp):
    sp.add_argument("--trigger", choices=attacks.TRIGGER_KINDS,
                    default="patch")
    sp.add_argument("--patch-size", type=int, default=3)
    sp.add_argument("--patch-offset", type=int, default=0)
    sp.add_argument("--patch-parity", type=int, default=0)
    sp.add_argument("--blend-alpha", type=float, default=0.2)
    sp.add_argument("--pattern-seed", type=int, default=0)
    sp.add_argument("--warp-grid", type=int, default=4)
    sp.add_argument("--warp-strength", type=float, default=2.0)
    sp.add_argument("--warp-seed", type=int, default=0)


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="shiftscan",
        description="Dropout-uncertainty backdoor training-data detection.")
    sub = ap.add_subparsers(dest="verb", required=True)

    sp = sub.add_parser("synth-data", help="render a synthetic dataset")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--per-class", type=int, required=True)
    sp.add_argument("--class-count", type=int, default=10)
    sp.add_argument("--side", type=int, default=32)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("poison", help="stamp a trigger into a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    _add_trigger_args(sp)
    sp.add_argument("--target-label", type=int, default=0)
    sp.add_argument("--poison-ratio", type=float, required=True)
    sp.add_argument("--cover-ratio", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("train", help="train the desk CNN on a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stage-widths", type=int, nargs="+",
                    default=[16, 32, 64])
    sp.add_argument("--blocks-per-stage", type=int, default=1)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--learning-rate", type=float, default=0.05)
    sp.add_argument("--decay-epochs", type=int, nargs="*", default=[10, 15])
    sp.add_argument("--decay-factor", type=float, default=0.1)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--weight-decay", type=float, default=1e-4)
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--augmentation", action="store_true")
    sp.add_argument("--normalization", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--model-seed", type=int, default=None)
    sp.add_argument("--adaptive-alpha", type=float, default=None)
    sp.add_argument("--ada-interval", type=int, default=50)
    sp.add_argument("--ada-p", type=float, default=0.5)
    sp.add_argument("--ada-k", type=int, default=3)

    sp = sub.add_parser("select-p", help="adaptive dropout-rate selection")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--train-data", required=True)
    sp.add_argument("--val-data", required=True)
    sp.add_argument("--p-grid", type=float, nargs="+",
                    default=list(detect.DEFAULT_P_GRID))
    sp.add_argument("--sigma-target", type=float, default=0.8)
    sp.add_argument("--k-select", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help="selection.json path")

    sp = sub.add_parser("detect", help="run one detector over a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--train-data", required=True)
    sp.add_argument("--val-data", required=True)
    sp.add_argument("--detector", choices=DETECTOR_NAMES, required=True)
    sp.add_argument("--p", type=float, default=None)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threshold-percentile", type=float, default=25.0)
    sp.add_argument("--blend-count", type=int, default=8)
    sp.add_argument("--blend-alpha", type=float, default=0.5)
    sp.add_argument("--factors", type=int, nargs="+",
                    default=list(detect.DEFAULT_SCP_FACTORS))
    sp.add_argument("--removal-fraction", type=float, default=0.15)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("report", help="score a saved detector report")
    sp.add_argument("--report-dir", required=True)
    sp.add_argument("--attack", default="unknown")
    sp.add_argument("--poison-ratio", type=float, default=None)

    sp = sub.add_parser("run", help="run one experiment config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--output-dir", default=None)

    sp = sub.add_parser("suite", help="run several configs, one table")
    sp.add_argument("--configs", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    return ap


def _cmd_synth_data(args):
    ds = data.synth_dataset(args.seed, args.per_class, args.class_count,
                            args.side)
    data.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images to {args.out}")


def _cmd_poison(args):
    ds = data.load_dataset(args.data)
    spec = attacks.PoisonSpec(_trigger_from_args(args), args.target_label,
                              args.poison_ratio, args.cover_ratio, args.seed)
    poisoned = attacks.poison_dataset(ds, spec)
    attacks.save_poisoned(poisoned, args.out)
    print(f"wrote poisoned dataset ({int(poisoned.backdoor_mask.sum())} "
          f"backdoor, {int(poisoned.cover_mask.sum())} cover) to {args.out}")


def _load_any_dataset(path):
    if os.path.exists(os.path.join(path, "poison_meta.json")):
        return attacks.load_poisoned(path)
    return data.load_dataset(path)


def _cmd_train(args):
    ds = _load_any_dataset(args.data)
    images = ds.dataset if isinstance(ds, attacks.PoisonedDataset) else ds
    arch = ArchSpec(stage_widths=tuple(args.stage_widths),
                    blocks_per_stage=args.blocks_per_stage,
                    class_count=images.class_count)
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.learning_rate,
                      decay_epochs=tuple(args.decay_epochs),
                      decay_factor=args.decay_factor, momentum=args.momentum,
                      weight_decay=args.weight_decay,
                      batch_size=args.batch_size,
                      augmentation=args.augmentation,
                      normalization=args.normalization, seed=args.seed)
    model0 = nets.build_model(arch, args.model_seed if args.model_seed
                              is not None else args.seed)
    if args.adaptive_alpha is not None:
        ada = AdaptiveAttackConfig(args.adaptive_alpha, args.ada_interval,
                                   DropoutConfig(args.ada_p, args.ada_k,
                                                 seed_for(args.seed,
                                                          "ada-psu")))
        ckpts = nets.train_adaptive_attacker(model0, ds, cfg, ada)
    else:
        ckpts = nets.train(model0, ds, cfg)
    nets.save_checkpoint(ckpts[-1], args.out)
    print(f"trained {cfg.epochs} epochs; final loss "
          f"{ckpts[-1].history[-1]['loss']:.4f}; checkpoint at {args.out}")


def _cmd_select_p(args):
    model = nets.load_checkpoint(args.checkpoint)
    train_ds = _load_any_dataset(args.train_data)
    val_ds = data.load_dataset(args.val_data, split_tag="clean_validation")
    policy = SelectionPolicy(tuple(args.p_grid), args.sigma_target,
                             args.k_select)
    p = detect.select_dropout_rate(model, train_ds, val_ds, policy,
                                   seed=args.seed)
    if args.out:
        report.write_json({"selected_p": p}, args.out)
    print(f"selected p = {p}")


def _cmd_detect(args):
    model = nets.load_checkpoint(args.checkpoint)
    train_ds = _load_any_dataset(args.train_data)
    val_ds = data.load_dataset(args.val_data, split_tag="clean_validation")
    name = args.detector
    if name in ("psbd", "mc_dropout"):
        if args.p is None:
            raise SystemExit("detector needs --p (run select-p first)")
        dc = DetectionConfig(DropoutConfig(args.p, args.k, args.seed),
                             args.threshold_percentile)
        fn = detect.psbd_detect if name == "psbd" else detect.mc_dropout_detect
        rep = fn(model, train_ds, val_ds, dc)
    elif name == "strip":
        rep = detect.strip_detect(model, train_ds, val_ds, args.blend_count,
                                  args.blend_alpha,
                                  args.threshold_percentile, args.seed)
    elif name == "scp":
        rep = detect.scp_detect(model, train_ds, val_ds,
                                tuple(args.factors),
                                args.threshold_percentile)
    else:
        rep = detect.spectral_signature_detect(model, train_ds,
                                               args.removal_fraction)
    truth = train_ds.backdoor_mask if isinstance(train_ds,
                                                 attacks.PoisonedDataset) \
        else None
    detect.save_report(rep, args.out, truth)
    print(f"{name}: flagged {int(rep.flags.sum())} of {len(rep.flags)}; "
          f"report at {args.out}")


def _cmd_report(args):
    import csv as _csv
    with open(os.path.join(args.report_dir, "report.json")) as f:
        doc = json.load(f)
    ids, scores, flags, truth = [], [], [], []
    with open(os.path.join(args.report_dir, "samples.csv")) as f:
        for row in _csv.DictReader(f):
            ids.append(int(row["sample_id"]))
            scores.append(float(row["score"]))
            flags.append(bool(int(row["flagged"])))
            if row["is_backdoor_truth"] == "":
                raise SystemExit("samples.csv carries no ground truth")
            truth.append(bool(int(row["is_backdoor_truth"])))
    rep = detect.DetectionReport(doc["detector"], np.array(ids),
                                 np.array(scores), np.array(flags),
                                 doc.get("T"), doc.get("p"),
                                 doc.get("orientation", "lower"),
                                 doc.get("config", {}))
    ms = report.compute_metrics(rep, np.array(truth))
    doc = report.metrics_doc(rep, ms, args.attack, args.poison_ratio)
    out = os.path.join(args.report_dir, "metrics.json")
    report.write_json(doc, out)
    print(f"tpr={ms.tpr} fpr={ms.fpr} auroc={ms.auroc}; wrote {out}")


def _cmd_run(args):
    cfg = load_config(args.config)
    run_dir = run_experiment(cfg, output_dir=args.output_dir)
    with open(os.path.join(run_dir, "run.json")) as f:
        summary = json.load(f)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"run directory: {run_dir}")


def _cmd_suite(args):
    configs = [load_config(c) for c in args.configs]
    table = run_suite(configs, args.out)
    with open(table) as f:
        print(f.read(), end="")
    print(f"table: {table}")


_COMMANDS = {"synth-data": _cmd_synth_data, "poison": _cmd_poison,
             "train": _cmd_train, "select-p": _cmd_select_p,
             "detect": _cmd_detect, "report": _cmd_report,
             "run": _cmd_run, "suite": _cmd_suite}


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        _COMMANDS[args.verb](args)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
