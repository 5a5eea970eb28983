"""Command-line entry point: ``embdistill <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import bds
from .config import CliConfig, load_config
from .embed_store import (
    EmbeddingSet,
    align_pairs,
    read_embeddings,
    read_label_csv,
    write_embeddings,
    write_label_csv,
)
from .errors import DataError, NumericalError, UsageError
from .evaluation import EvalReport, LabeledSplit, ProbeTask, evaluate_tasks
from .features import log_mel, read_wav
from .trainer import (
    TrainConfig,
    distill,
    export_student_embeddings,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger("embdistill")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_COLUMNS = ("k", "sampling", "final_loss", "macro_avg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers -----------------------------------------------------------------

def _resolve(args) -> CliConfig:
    """Config file (if any) overlaid with explicit command-line flags."""
    cfg = load_config(args.config) if getattr(args, "config", None) else CliConfig()
    train = cfg.train.to_dict()
    overrides = {
        "epochs": args.epochs,
        "seed": args.seed,
        "loss_kind": args.loss,
        "k_clusters": args.k_clusters,
        "batch_size": args.batch_size,
        "base_lr": args.lr,
        "student_dim": args.student_dim,
        "head_hidden": args.head_hidden,
        "epoch_sample_size": args.epoch_sample_size,
    }
    if args.student_hidden is not None:
        overrides["student_hidden"] = [int(v) for v in args.student_hidden.split(",") if v]
    if args.no_bds:
        overrides["bds_enabled"] = False
    train.update({k: v for k, v in overrides.items() if v is not None})
    cfg.train = TrainConfig.from_dict(train)
    for key in ("inputs", "teacher", "tasks", "teacher_report", "out_dir"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            cfg.paths[key] = str(value)
    if getattr(args, "probe", None):
        cfg.probe.kind = args.probe
    return cfg


def _require(cfg: CliConfig, *keys):
    missing = [k for k in keys if not cfg.paths.get(k)]
    if missing:
        raise UsageError(f"missing required paths: {', '.join('--' + k.replace('_', '-') for k in missing)}")
    for k in keys:
        if k != "out_dir" and not Path(cfg.paths[k]).exists():
            raise DataError(f"{k} file not found: {cfg.paths[k]}")


def _out_dir(cfg: CliConfig) -> Path:
    out = Path(cfg.paths["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _paired(cfg: CliConfig):
    return align_pairs(read_embeddings(cfg.paths["inputs"]), read_embeddings(cfg.paths["teacher"]))


def load_split(emb_path, label_path, split: str) -> LabeledSplit:
    emb = read_embeddings(emb_path)
    ids, labels = read_label_csv(label_path)
    pos = emb.index()
    missing = [i for i in ids if i not in pos]
    if missing:
        raise DataError(f"{label_path}: {len(missing)} labelled ids absent from {emb_path} (e.g. {missing[0]!r})")
    rows = [pos[i] for i in ids]
    return LabeledSplit(emb.data[rows].astype(np.float64), labels, split, ids=ids)


def load_tasks(path) -> list[ProbeTask]:
    """Read a task list::

        {"tasks": [{"name": "genre", "train": {"embeddings": "...", "labels": "..."},
                    "test": {"embeddings": "...", "labels": "..."}}]}

    Paths are relative to the task file.
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
        entries = spec["tasks"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed task file ({exc})") from None
    tasks = []
    for entry in entries:
        splits = {}
        for split in ("train", "test"):
            s = entry[split]
            splits[split] = load_split(path.parent / s["embeddings"], path.parent / s["labels"], split)
        tasks.append(ProbeTask(entry["name"], splits["train"], splits["test"]))
    if not tasks:
        raise DataError(f"{path}: no tasks")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate task names")
    return tasks


# -- commands ----------------------------------------------------------------

def _extract_one(path: Path, mode: str, floor: float):
    spec = log_mel(read_wav(path), eps_floor=floor)
    if mode == "pooled":
        return spec.frames.mean(axis=0)
    return spec.frames.ravel()


def cmd_extract(args) -> int:
    wav_dir = Path(args.wav_dir)
    if not wav_dir.is_dir():
        raise DataError(f"not a directory: {wav_dir}")
    files = sorted(p for p in wav_dir.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise DataError(f"no .wav files in {wav_dir}")
    ids = [p.stem for p in files]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise DataError(f"id collision between files with stem(s) {dupes}")
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        rows = list(pool.map(lambda p: _extract_one(p, args.mode, args.floor), files))
    widths = {r.size for r in rows}
    if len(widths) > 1:
        raise DataError(f"windowed mode needs equal-length clips; got feature sizes {sorted(widths)}")
    write_embeddings(args.out, EmbeddingSet(ids, np.vstack(rows)))
    logger.info("wrote %d feature vectors of dim %d to %s", len(ids), rows[0].size, args.out)
    return EXIT_OK


def cmd_cluster(args) -> int:
    teacher = read_embeddings(args.teacher)
    model = bds.kmeans(
        teacher.data, args.k, max_iter=args.max_iter, seed=args.seed, normalize=args.normalize
    )
    weights = bds.bds_weights(model.assignments, args.offset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "centroids.ssnd", EmbeddingSet([f"c{j}" for j in range(model.k)], model.centroids))
    with open(out / "assignments.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "cluster", "weight"])
        for i, c, wt in zip(teacher.ids, model.assignments, weights.weights):
            w.writerow([i, int(c), repr(float(wt))])
    resolved = {
        "teacher": str(args.teacher), "k": args.k, "seed": args.seed, "offset": args.offset,
        "normalize": args.normalize, "max_iter": args.max_iter,
        "inertia": model.inertia, "iterations": model.n_iter,
    }
    (out / "cluster_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    logger.info("k=%d inertia %.6g after %d iterations", model.k, model.inertia, model.n_iter)
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _resolve(args)
    _require(cfg, "inputs", "teacher", "out_dir")
    out = _out_dir(cfg)
    data = _paired(cfg)
    resume = None
    if args.resume:
        resume, saved = load_checkpoint(args.resume)
        if saved.hash() != cfg.train.hash():
            raise UsageError("resume checkpoint was trained with a different configuration")
    cfg.write(out / "resolved_config.json")
    student, head, report = distill(
        data, cfg.train, resume=resume, until_epoch=args.until_epoch, log_path=out / "train_log.csv"
    )
    ckpt = save_checkpoint(out / "checkpoint", report.state, cfg.train)
    report.checkpoint_path = str(ckpt)
    summary = {
        "epoch_losses": report.epoch_losses,
        "final_loss": report.final_loss,
        "wall_time": report.wall_time,
        "checkpoint": report.checkpoint_path,
        "config_hash": report.config_hash,
        "n_samples": len(data),
        "dropped_inputs": data.dropped_inputs,
        "dropped_targets": data.dropped_targets,
    }
    (out / "train_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"final loss {report.final_loss:.6f}  ({len(report.epoch_losses)} epochs, {report.wall_time:.1f} s)")
    return EXIT_OK


def cmd_export(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    emb = export_student_embeddings(
        state.student, read_embeddings(args.inputs), head=state.head if args.use_head else None
    )
    write_embeddings(args.out, emb)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    _require(cfg, "tasks", "out_dir")
    out = _out_dir(cfg)
    tasks = load_tasks(cfg.paths["tasks"])
    embed = None
    if args.checkpoint:
        state, _ = load_checkpoint(args.checkpoint)
        if args.use_head:
            embed = lambda X: state.head(state.student(X))  # noqa: E731
        else:
            embed = state.student
    teacher_report = None
    if cfg.paths.get("teacher_report"):
        teacher_report = EvalReport.from_csv(cfg.paths["teacher_report"])
    report = evaluate_tasks(tasks, student=embed, probe_config=cfg.probe, teacher_report=teacher_report)
    report.to_csv(out / "eval_report.csv")
    (out / "eval_report.txt").write_text(report.table() + "\n")
    cfg.write(out / "resolved_config.json")
    print(report.table())
    return EXIT_OK


def cmd_ablate_clusters(args) -> int:
    cfg = _resolve(args)
    _require(cfg, "inputs", "teacher", "tasks", "out_dir")
    try:
        k_list = [int(k) for k in args.k_list.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--k-list must be comma-separated integers, got {args.k_list!r}") from None
    out = _out_dir(cfg)
    cfg.write(out / "resolved_config.json")
    rows = bds.cluster_sweep(
        _paired(cfg), k_list, cfg.train, load_tasks(cfg.paths["tasks"]),
        out_csv=out / "cluster_sweep.csv", probe_config=cfg.probe,
    )
    for row in rows:
        print(f"{row['sampling']:>6} k={row['k']!s:>4}  loss {row['final_loss']:.5f}  macro {row['macro_avg']:.2f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    """Write the desk-scale synthetic dataset plus matching task files."""
    from .synthetic import make_synthetic

    syn = make_synthetic(n=args.n, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "inputs.ssnd", syn.embedding_set("inputs"))
    write_embeddings(out / "teacher.ssnd", syn.embedding_set("targets"))
    for which, prefix in (("inputs", "input"), ("targets", "teacher")):
        tasks = {"tasks": [{"name": "synth10"}]}
        for split, rows in (("train", syn.train_idx), ("test", syn.test_idx)):
            ids = [syn.ids[i] for i in rows]
            data = syn.inputs if which == "inputs" else syn.targets
            write_embeddings(out / f"{split}_{prefix}.ssnd", EmbeddingSet(ids, data[rows]))
            write_label_csv(out / f"{split}_labels.csv", ids, syn.labels[rows])
            tasks["tasks"][0][split] = {"embeddings": f"{split}_{prefix}.ssnd", "labels": f"{split}_labels.csv"}
        name = "tasks.json" if which == "inputs" else "teacher_tasks.json"
        (out / name).write_text(json.dumps(tasks, indent=2) + "\n")
    logger.info("synthetic dataset (%d samples) written to %s", args.n, out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--config", help="INI or JSON config file")
    p.add_argument("--inputs", help="student input features (SSND)")
    p.add_argument("--teacher", help="teacher embeddings (SSND)")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=["mse", "l1", "cosine", "clap", "kl"])
    p.add_argument("--k-clusters", type=int)
    p.add_argument("--no-bds", action="store_true", help="uniform sampling (random baseline)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--student-hidden", help="comma-separated hidden sizes, e.g. 32,32")
    p.add_argument("--student-dim", type=int)
    p.add_argument("--head-hidden", type=int)
    p.add_argument("--epoch-sample-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="embdistill", description="Embedding-only knowledge distillation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="log-mel features from a directory of WAV files")
    p.add_argument("wav_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["pooled", "windowed"], default="pooled")
    p.add_argument("--floor", type=float, default=1e-5)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("cluster", help="k-means pseudo-labels and sampling weights")
    p.add_argument("teacher")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--offset", type=float, default=100.0)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--normalize", action="store_true", help="L2-normalise embeddings before clustering")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("distill", help="train a student against teacher embeddings")
    _train_flags(p)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--until-epoch", type=int, help="stop after this many epochs")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("export", help="embed inputs with a trained student")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--use-head", action="store_true", help="export mapped embeddings instead")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="probe embeddings on labelled tasks")
    _train_flags(p)
    p.add_argument("--tasks", help="task list (JSON)")
    p.add_argument("--checkpoint", help="embed task inputs with this student first")
    p.add_argument("--use-head", action="store_true")
    p.add_argument("--teacher-report", dest="teacher_report", help="report CSV to compute retention against")
    p.add_argument("--probe", choices=["linear", "knn"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-clusters", help="sweep the number of clusters plus a random baseline")
    _train_flags(p)
    p.add_argument("--tasks", help="task list (JSON) over student inputs")
    p.add_argument("--k-list", required=True, help="comma-separated cluster counts")
    p.add_argument("--probe", choices=["linear", "knn"])
    p.set_defaults(func=cmd_ablate_clusters)

    p = sub.add_parser("synth", help="write the synthetic desk-scale dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
