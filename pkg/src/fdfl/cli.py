"""Command-line entry point: ``fdfl <command> [--config PATH] [--set KEY=VALUE ...]``.

Exit status is 0 on success, 1 for configuration or input errors, 2 for
failures during a run. Diagnostics go to stderr; results go to files, with
a short summary on stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig, apply_overrides, load_config, save_config
from .data import DataError, CorpusManifest, build_manifest, corpus_hash, load_split, synth_generate
from .freq import PreprocessError
from .losses import LossInputError
from .metrics import MetricInputError, read_scores_csv, write_report_json, write_scores_csv
from .model import ModelConfigError

log = logging.getLogger("fdfl")

USER_ERRORS = (ConfigError, DataError, PreprocessError, ModelConfigError, LossInputError,
               MetricInputError, FileNotFoundError, KeyError)


class UsageError(Exception):
    pass


def _config(args) -> TrainConfig:
    cfg = load_config(args.config)
    overrides = list(args.set or [])
    if args.seed is not None:
        key = "data.seed" if args.command == "synth" else "run.seed"
        overrides.append(f"{key}={args.seed}")
    return apply_overrides(cfg, overrides)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_manifest(cfg: TrainConfig, split: str) -> CorpusManifest:
    root = Path(cfg.data.root)
    if (root / "manifest.jsonl").exists():
        man = CorpusManifest.load(root / "manifest.jsonl").select(split)
        if not len(man):
            raise DataError(f"manifest under {root} has no {split!r} records")
        return man
    return build_manifest(root / split, cfg.data.frames_real, cfg.data.frames_fake, split)


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg.data.root)
    man = synth_generate(cfg.data.synthetic(), out)
    counts = {s: man.select(s).class_counts for s in ("train", "val", "test")}
    print(json.dumps({"root": str(out), "frames": len(man), "class_counts": counts,
                      "corpus_hash": corpus_hash(out)}))
    return 0


def cmd_stats(args) -> int:
    from .trainer import compute_stats

    cfg = _config(args)
    out = _out(args, cfg.run.out)
    split = load_split(_split_manifest(cfg, "train"))
    stats = compute_stats(split)
    stats.save(out / "stats.json")
    print(json.dumps({"split": "train", "images": len(split), "stats": str(out / "stats.json")}))
    return 0


def cmd_train(args) -> int:
    from .trainer import load_corpus, train

    cfg = _config(args)
    out = _out(args, cfg.run.out)
    corpus = load_corpus(cfg)
    ckpt = train(cfg, corpus, out)
    print(json.dumps({"checkpoint": str(out / "checkpoint"), "best": ckpt.best,
                      "final_loss": ckpt.final_loss}))
    return 0


def _checkpoint(args):
    from .trainer import CheckpointRecord

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not (path / "checkpoint.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return CheckpointRecord.load(path)


def cmd_eval(args) -> int:
    from .trainer import evaluate

    ckpt = _checkpoint(args)
    cfg = apply_overrides(ckpt.config, list(args.set or []))
    split = args.split or cfg.run.test_split
    out = _out(args, str(Path(args.checkpoint) / f"eval_{split}"))
    ev = evaluate(ckpt, load_split(_split_manifest(cfg, split)))
    write_scores_csv(out / "scores.csv", ev.frames)
    write_report_json(out / "report.json", {"frame": ev.frame, "video": ev.video})
    print(json.dumps(ev.to_json(), indent=2))
    return 0


def cmd_ablate(args) -> int:
    from .trainer import load_corpus, run_ablation, summarize

    cfg = _config(args)
    out = _out(args, cfg.run.out)
    seeds = [args.seed] if args.seed is not None else cfg.run.seeds
    grid = [float(x) for x in args.grid.split(",")] if args.grid else None
    save_config(cfg, out / "base_config.json")
    cells = run_ablation(args.protocol, cfg, load_corpus(cfg), seeds, out, grid)
    for row in summarize(cells):
        print(json.dumps(row))
    return 2 if any(c.error for c in cells) else 0


def cmd_export(args) -> int:
    from .trainer import distance_gap, export_embeddings

    ckpt = _checkpoint(args)
    cfg = apply_overrides(ckpt.config, list(args.set or []))
    split = args.split or cfg.run.test_split
    out = _out(args, str(Path(args.checkpoint) / f"export_{split}"))
    exp = export_embeddings(ckpt, load_split(_split_manifest(cfg, split)), args.n_per_class,
                            cfg.run.seed if args.seed is None else args.seed)
    exp.write_csv(out / "embeddings.csv")
    exp.write_center(out / "center.json")
    nat, man = distance_gap(exp)
    print(json.dumps({"rows": len(exp.labels), "natural_distance": nat, "manipulated_distance": man}))
    return 0


def _sweep_points(path: Path) -> tuple[str, list[float], list[float], list[float]]:
    """Read a summary CSV whose variant names look like ``m=0.1`` or ``lambda=0.5``."""
    xs, aucs, paucs, name = [], [], [], None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            m = re.fullmatch(r"(\w+)=([-+0-9.eE]+)", row["variant"])
            if not m:
                raise DataError(f"{path}: variant {row['variant']!r} is not a sweep point")
            name = m.group(1)
            xs.append(float(m.group(2)))
            aucs.append(float(row["auc"]))
            paucs.append(float(row["pauc_0.1"]))
    if not xs:
        raise DataError(f"{path}: no rows")
    return name, xs, aucs, paucs


def cmd_plot(args) -> int:
    from . import plots

    out = _out(args, "runs/plots")
    made = []
    inputs = {"roc": args.scores, "distances": args.embeddings, "sweep": args.sweep}
    missing = [f"--{'scores' if k == 'roc' else 'embeddings' if k == 'distances' else k}"
               for k, v in inputs.items() if k in args.kind and not v]
    if missing:
        raise UsageError(f"missing inputs for plot kinds {args.kind}: {', '.join(missing)}")
    for label, path in (("scores", args.scores), ("embeddings", args.embeddings), ("sweep", args.sweep)):
        if path and not Path(path).exists():
            raise FileNotFoundError(f"{label} file {path} does not exist")
    if "roc" in args.kind:
        frames = read_scores_csv(args.scores)
        made.append(plots.plot_roc([f.score for f in frames], [f.label for f in frames], out / "roc"))
    if "distances" in args.kind:
        from .trainer import read_export_csv

        labels, dists, _ = read_export_csv(args.embeddings)
        made.append(plots.plot_distance_histogram(labels, dists, out / "distances"))
    if "sweep" in args.kind:
        name, xs, aucs, paucs = _sweep_points(Path(args.sweep))
        made.append(plots.plot_sweep(xs, aucs, out / f"sweep_{name}", name, paucs, log_x=name == "lambda"))
    if "energy" in args.kind:
        cfg = _config(args)
        split = load_split(_split_manifest(cfg, args.split or "train"))
        nat, man = (split.images[np.flatnonzero(split.labels == y)[: args.max_images]] for y in (0, 1))
        if not len(nat) or not len(man):
            raise DataError("energy plot needs frames of both classes")
        path, diff = plots.plot_band_energy(nat, man, out / "band_energy")
        u, v = np.unravel_index(np.argmax(diff), diff.shape)
        log.info("largest luma band energy increase at (u=%d, v=%d)", u, v)
        made.append(path)
    print(json.dumps({"plots": [str(p) for p in made]}))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export": cmd_export,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdfl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, value parsed as JSON; repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    sub.add_parser("stats", parents=[common], help="per-channel statistics of the train split")
    sub.add_parser("train", parents=[common], help="train one model")
    for name, helptext in (("eval", "score a split with a checkpoint"),
                           ("export", "write embeddings and distances to the center")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split")
        if name == "export":
            p.add_argument("--n-per-class", type=int, default=5000)
    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid over seeds")
    p.add_argument("--protocol", required=True,
                   choices=["losses", "fusion", "components", "sweep_lambda", "sweep_m"])
    p.add_argument("--grid", help="comma-separated values for sweep protocols")
    p = sub.add_parser("plot", parents=[common], help="render figures with their CSVs")
    p.add_argument("--kind", nargs="+", required=True, choices=["roc", "distances", "energy", "sweep"])
    p.add_argument("--scores", help="scores CSV from eval")
    p.add_argument("--embeddings", help="embeddings CSV from export")
    p.add_argument("--sweep", help="summary CSV from a sweep ablation")
    p.add_argument("--split", help="split for energy heatmaps (default train)")
    p.add_argument("--max-images", type=int, default=64)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on bad usage; usage errors are user errors here
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, *USER_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("run failed", exc_info=True)
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
