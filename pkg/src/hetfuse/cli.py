"""Command line entry point: ``hetfuse <subcommand> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional

from . import config as C
from .datamodel import load_manifest, load_sample, save_sample, split_patientwise, subsample_training, SplitSpec
from .experiments import (
    ExperimentConfig,
    PreparedData,
    ReportTable,
    Row,
    ensure_dataset,
    evaluate_model,
    is_preprocessed,
    run_ablation,
    run_data_efficiency,
    run_noise_sweep,
    run_superres,
)
from .network import ArchitectureConfig
from .preprocess import PreprocessConfig, preprocess_sample
from .synthgen import generate_dataset
from .training import scan_checkpoints, select_top_checkpoints, train

log = logging.getLogger("hetfuse")

SUBCOMMANDS = ("generate", "preprocess", "train", "eval", "sweep", "plot")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetfuse",
        description="Fusion of 3D volumes and 2D images for en-face segmentation.",
        epilog="config keys (file lines `key = value`, or --set key=value):\n" + C.help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory (all artifacts go here)")
    parser.add_argument("--run", type=Path, help="eval: training run directory (default: --out)")
    parser.add_argument("--from", dest="source", type=Path, help="plot: directory holding report.csv / curves.csv")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _write_echo(out: Path, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(C.dump(cfg), encoding="utf-8")


def cmd_generate(cfg: dict, out: Path, args) -> None:
    m = generate_dataset(C.scene_spec(cfg), cfg["data.n_patients"], cfg["data.samples_per_patient"], cfg["seed"], out)
    print(f"wrote {len(m.samples)} samples to {out}")


def _source_manifest(cfg: dict, out: Path):
    if cfg["data.root"]:
        return load_manifest(cfg["data.root"])
    return ensure_dataset(C.experiment_config(cfg, out))


def cmd_preprocess(cfg: dict, out: Path, args) -> None:
    src = _source_manifest(cfg, out)
    pc = C.preprocess_config(cfg)
    for rel, _ in src.samples:
        save_sample(preprocess_sample(load_sample(src.root / rel), pc), out / rel)
    m = type(src)(root=out, samples=list(src.samples), extra={"preprocessed": True, "preprocess": asdict(pc)})
    m.save()
    print(f"preprocessed {len(m.samples)} samples into {out}")


def cmd_train(cfg: dict, out: Path, args) -> None:
    manifest = _source_manifest(cfg, out)
    split = split_patientwise(manifest, cfg["split.fractions"], cfg["seed"])
    split = subsample_training(split, cfg["split.train_pct"], cfg["seed"])
    pc = None if is_preprocessed(manifest) else C.preprocess_config(cfg)
    data = PreparedData.load(manifest, split, pc)
    arch, tcfg = C.arch_config(cfg), C.train_config(cfg)
    art = train(tcfg, arch, data.train_subset(split), data.prepped("val"), out)
    doc = {
        "dataset_root": str(manifest.root),
        "split": split.to_dict(),
        "preprocess": None if pc is None else asdict(pc),
        "arch": arch.to_dict(),
        "image_modality": tcfg.image_modality,
        "top_k": tcfg.top_k,
        "seed": cfg["seed"],
    }
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    print(f"trained {art.n_epochs} epochs, {len(art.checkpoints)} checkpoints in {out}")


def cmd_eval(cfg: dict, out: Path, args) -> None:
    run = args.run or out
    run_json = run / "run.json"
    if not run_json.is_file():
        raise FileNotFoundError(f"not a training run directory (no run.json): {run}")
    doc = json.loads(run_json.read_text(encoding="utf-8"))
    arch = ArchitectureConfig.from_dict(doc["arch"])
    split = SplitSpec.from_dict(doc["split"])
    ckpts = select_top_checkpoints(scan_checkpoints(run), doc.get("top_k", cfg["train.top_k"]))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {run}")
    pc = None if doc["preprocess"] is None else PreprocessConfig(**doc["preprocess"])
    manifest = load_manifest(doc["dataset_root"])
    report = evaluate_model(ckpts, arch, manifest, split, "test", preprocess=pc, image_modality=doc["image_modality"])
    table = ReportTable([Row(arch.fusion_mode, split.train_pct, doc.get("seed", 0), report, run)])
    table.write(out)
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    print(f"dice {report.dice_mean:.4f} hd95 {report.hd95_mean:.4f} auroc {report.auroc:.4f} aupr {report.aupr:.4f}")


def cmd_sweep(cfg: dict, out: Path, args) -> None:
    ecfg = C.experiment_config(cfg, out)
    kind = cfg["experiment.kind"]
    if kind == "ablation":
        run_ablation(ecfg)
    elif kind == "data_efficiency":
        run_data_efficiency(ecfg)
    elif kind == "noise":
        table = run_ablation(ecfg)
        run_noise_sweep(ecfg, table)
    elif kind == "superres":
        run_superres(ecfg)
    else:
        raise UsageError(f"unknown experiment.kind: {kind}")
    print(f"wrote {out / 'report.csv'}")


def _read_csv(path: Path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_plot(cfg: dict, out: Path, args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = args.source or out
    made = []
    summary = src / "summary.csv" if (src / "summary.csv").is_file() else src / "report.csv"
    if summary.is_file():
        rows = [r for r in _read_csv(summary) if r["dice_mean"]]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode in sorted({r["mode"] for r in rows}):
            pts = sorted((float(r["pct"]), float(r["dice_mean"])) for r in rows if r["mode"] == mode)
            ax.plot([p for p, _ in pts], [d for _, d in pts], "o-", label=mode)
        ax.set_xlabel("training fraction")
        ax.set_ylabel("test Dice")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "dice.png", dpi=120)
        plt.close(fig)
        made.append("dice.png")
    if (src / "curves.csv").is_file():
        rows = _read_csv(src / "curves.csv")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode in sorted({r["mode"] for r in rows}):
            pts = sorted((int(r["n_masks"]), float(r["aupr"])) for r in rows if r["mode"] == mode)
            ax.plot([n for n, _ in pts], [a for _, a in pts], "o-", label=mode)
        ax.set_xlabel("cutout masks")
        ax.set_ylabel("pooled AUPR")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "noise.png", dpi=120)
        plt.close(fig)
        made.append("noise.png")
    if not made:
        raise FileNotFoundError(f"nothing to plot in {src}")
    print("wrote " + ", ".join(str(out / m) for m in made))


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        text = args.config.read_text(encoding="utf-8") if args.config else ""
        cfg = C.resolve(text, overrides)
    except (C.ConfigKeyError, ValueError, OSError) as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    out = args.out
    try:
        _write_echo(out, cfg)
        COMMANDS[args.subcommand](cfg, out, args)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("failure", exc_info=True)
        msg = str(e).replace("\n", " ")
        print(f"error: runtime: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
