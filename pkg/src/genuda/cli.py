"""Command-line front door: synth | pmi | train | eval | sweep | report.

Every command resolves its output directory under $GENUDA_OUT (when set and
the path is relative), refuses to clobber existing artifacts unless --force
is given, writes files atomically (temp + rename) and records a manifest.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from hashlib import sha256

import numpy as np

from .corpus import (Corpus, DomainPair, LabelSpace, load_corpus, load_pair_dir,
                     save_pair_dir, synth_generate, SynthSpec)
from .evaluation import EvalReport, evaluate, export_embeddings, masked_inference_eval
from .kvconfig import ConfigError, config_hash, dump_kv, load_kv
from .masking import compute_pmi, select_word_sets
from .model import ModelState, load_parameters, save_parameters
from .templating import PromptTemplate
from .tokenizer import Vocab
from .training import TrainConfig, log_to_csv, run

MASK_RATE_SWEEP = (5, 15, 30, 60, 90)       # percent
SHOTS_SWEEP = (32, 128, 256)
SCHEDULE_SWEEP = ("two_phase_cpt", "single_phase_cpt", "single_phase_vanilla",
                  "src_only")
PHASE1_DATA_SWEEP = ("source_only", "target_only", "source_and_target")


class CliError(RuntimeError):
    """User-facing failure; printed as a single line, exit code 1."""


def _out_path(path: str) -> str:
    root = os.environ.get("GENUDA_OUT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _atomic_write(path: str, data: str | bytes) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    tmp = path + ".tmp"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _hash_file(path: str) -> str:
    with open(path, "rb") as fh:
        return sha256(fh.read()).hexdigest()


class Manifest:
    """Written before the work starts, finalized with artifacts afterwards."""

    def __init__(self, out_dir: str, command: str, config_kv: dict[str, str],
                 seed: int | None, input_paths: list[str]):
        self.path = os.path.join(out_dir, "manifest.json")
        self.payload = {
            "command": command,
            "config": dict(sorted(config_kv.items())),
            "config_hash": config_hash(config_kv),
            "seed": seed,
            "input_hashes": {p: _hash_file(p) for p in input_paths},
            "started_utc": _utcnow(),
            "finished_utc": None,
            "artifacts": [],
        }
        self.write()

    def write(self) -> None:
        _atomic_write(self.path, json.dumps(self.payload, indent=2, sort_keys=True) + "\n")

    def finish(self, artifacts: list[str]) -> None:
        self.payload["finished_utc"] = _utcnow()
        self.payload["artifacts"] = sorted(artifacts)
        self.write()


def _prepare_out_dir(out_dir: str, force: bool) -> str:
    out_dir = _out_path(out_dir)
    manifest = os.path.join(out_dir, "manifest.json")
    if os.path.exists(manifest) and not force:
        raise CliError(f"{out_dir} already holds a run (use --force to overwrite)")
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    items = load_kv(args.spec)
    spec = SynthSpec.from_kv(items)
    out_dir = _prepare_out_dir(args.out, args.force)
    manifest = Manifest(out_dir, "synth", items, spec.seed, [args.spec])
    pair = synth_generate(spec)
    save_pair_dir(pair, out_dir)
    artifacts = [os.path.join(out_dir, f)
                 for f in sorted(os.listdir(out_dir)) if f != "manifest.json"]
    manifest.finish(artifacts)
    print(f"wrote domain pair to {out_dir}")
    return 0


def cmd_pmi(args) -> int:
    names = tuple(args.classes.split(","))
    space = LabelSpace(names, names)
    corpus = load_corpus(args.corpus, args.format, space)
    table = compute_pmi(corpus)
    sets = select_word_sets(table, args.k_percent, args.min_freq)
    ranked = sorted(table.word_counts,
                    key=lambda w: (-table.score(w), w))
    lines = ["word,class,pmi,count"]
    for word in ranked:
        for cls in sorted(table.class_counts):
            if (word, cls) in table.pmi:
                lines.append(f"{word},{cls},{table.pmi[(word, cls)]!r},"
                             f"{table.pair_counts[(word, cls)]}")
    out = _out_path(args.out)
    _atomic_write(out, "\n".join(lines) + "\n")
    print(f"{len(table.word_counts)} words, "
          f"{len(sets.informative)} informative / {len(sets.uninformative)} "
          f"uninformative -> {out}")
    return 0


def _load_pair_for(config: TrainConfig) -> DomainPair:
    if not config.data_dir:
        raise ConfigError("config key 'data.dir' is required")
    return load_pair_dir(config.data_dir)


def cmd_train(args) -> int:
    items = load_kv(args.config)
    config = TrainConfig.from_kv(items)
    out_dir = _prepare_out_dir(args.out, args.force)
    manifest = Manifest(out_dir, "train", config.to_kv(), config.seed,
                        [args.config])
    pair = _load_pair_for(config)

    def progress(step, total, row):
        if args.verbose and (step % 200 == 0 or step == total - 1):
            print(f"step {step + 1}/{total} loss {row.loss:.4f}")

    result = run(config, pair, progress=progress)
    model_path = os.path.join(out_dir, "model.bin")
    save_parameters(result.state.params, model_path)
    vocab_path = os.path.join(out_dir, "vocab.txt")
    _atomic_write(vocab_path, result.state.vocab.to_text())
    config_path = os.path.join(out_dir, "config.kv")
    _atomic_write(config_path, dump_kv(config.to_kv()))
    log_path = os.path.join(out_dir, "losses.csv")
    _atomic_write(log_path, log_to_csv(result.log))
    manifest.finish([model_path, vocab_path, config_path, log_path])
    print(f"trained {config.schedule} for {config.total_steps} steps -> {out_dir}")
    return 0


def load_checkpoint(run_dir: str) -> tuple[ModelState, TrainConfig]:
    config = TrainConfig.from_kv(load_kv(os.path.join(run_dir, "config.kv")))
    with open(os.path.join(run_dir, "vocab.txt"), "r", encoding="utf-8") as fh:
        vocab = Vocab.from_text(fh.read())
    params = load_parameters(os.path.join(run_dir, "model.bin"))
    return ModelState(config.model_config(len(vocab)), params, vocab), config


def cmd_eval(args) -> int:
    state, config = load_checkpoint(_out_path(args.run))
    pair = load_pair_dir(args.pair) if args.pair else _load_pair_for(config)
    template = PromptTemplate.for_label_space(
        pair.label_space, kind="cls", instruction=config.instruction,
        cls_pattern=config.cls_pattern)
    if args.masked_inference:
        table = compute_pmi(pair.source.train)
        sets = select_word_sets(table, config.pmi_k_percent, config.pmi_min_freq)
        report = masked_inference_eval(state, pair, sets, args.masked_inference,
                                       args.split, template, config.seed,
                                       config.hash())
    else:
        report = evaluate(state, pair, args.split, template, config.seed,
                          config.hash())
    if args.export_embeddings:
        export_embeddings(state, pair, args.split,
                          _out_path(args.export_embeddings), template)
    text = report.to_json()
    if args.out:
        _atomic_write(_out_path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


# -------------------------------------------------------------------- sweep

def _axis_cells(axis: str, values: str | None) -> list[tuple[str, dict[str, str]]]:
    defaults = {"mask_rate": [str(v) for v in MASK_RATE_SWEEP],
                "shots": [str(v) for v in SHOTS_SWEEP],
                "schedule": list(SCHEDULE_SWEEP),
                "phase1_data": list(PHASE1_DATA_SWEEP)}
    if axis not in defaults:
        raise CliError(f"unknown sweep axis {axis!r}")
    cells = values.split(",") if values else defaults[axis]
    out = []
    for cell in cells:
        if axis == "mask_rate":
            out.append((cell, {"mask.rate": repr(float(cell) / 100.0)}))
        elif axis == "shots":
            out.append((cell, {"kshot": cell}))
        elif axis == "schedule":
            out.append((cell, {"schedule": cell}))
        else:
            out.append((cell, {"phase1.data": cell}))
    return out


def _run_cell(task: tuple[dict[str, str], str, str, int]) -> dict:
    """Train + evaluate one (cell, seed); module-level for multiprocessing."""
    items, cell_value, cell_dir, seed = task
    config = TrainConfig.from_kv(items)
    pair = _load_pair_for(config)
    result = run(config, pair)
    report = evaluate(result.state, pair, "test", seed=config.seed,
                      config_hash=config.hash())
    os.makedirs(cell_dir, exist_ok=True)
    save_parameters(result.state.params, os.path.join(cell_dir, "model.bin"))
    _atomic_write(os.path.join(cell_dir, "vocab.txt"), result.state.vocab.to_text())
    _atomic_write(os.path.join(cell_dir, "config.kv"), dump_kv(config.to_kv()))
    _atomic_write(os.path.join(cell_dir, "losses.csv"), log_to_csv(result.log))
    _atomic_write(os.path.join(cell_dir, "eval.json"), report.to_json())
    return {"cell": cell_value, "seed": seed,
            "source": report.accuracy("source"), "target": report.accuracy("target")}


def aggregate_rows(results: list[dict]) -> str:
    """Aggregate per-seed accuracies: mean and sample stddev per cell."""
    cells: dict[str, list[dict]] = {}
    for row in results:
        cells.setdefault(str(row["cell"]), []).append(row)
    lines = ["cell,n_seeds,source_mean,source_std,target_mean,target_std"]
    for cell, rows in cells.items():
        src = np.array([r["source"] for r in rows])
        tgt = np.array([r["target"] for r in rows])
        std = (lambda x: float(np.std(x, ddof=1)) if len(x) > 1 else 0.0)
        lines.append(",".join([cell, str(len(rows)),
                               repr(float(src.mean())), repr(std(src)),
                               repr(float(tgt.mean())), repr(std(tgt))]))
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    base_items = load_kv(args.config)
    TrainConfig.from_kv(base_items)    # validate keys before spawning work
    seeds = [int(s) for s in args.seeds.split(",")]
    out_dir = _prepare_out_dir(args.out, args.force)
    manifest = Manifest(out_dir, "sweep", base_items, None, [args.config])
    tasks = []
    for cell_value, overrides in _axis_cells(args.axis, args.values):
        for seed in seeds:
            items = dict(base_items)
            items.update(overrides)
            items["seed"] = str(seed)
            cell_dir = os.path.join(out_dir, f"{args.axis}_{cell_value}_seed{seed}")
            tasks.append((items, cell_value, cell_dir, seed))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    agg_path = os.path.join(out_dir, "aggregate.csv")
    _atomic_write(agg_path, aggregate_rows(results))
    artifacts = [agg_path] + [t[2] for t in tasks]
    manifest.finish(artifacts)
    print(f"swept {args.axis} over {len(tasks)} runs -> {agg_path}")
    return 0


def cmd_report(args) -> int:
    rows = []
    in_dir = _out_path(args.runs)
    for name in sorted(os.listdir(in_dir)):
        path = os.path.join(in_dir, name, "eval.json")
        if not os.path.isfile(path):
            continue
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        rows.append({"cell": name,
                     "seed": payload["domains"]["source"]["seed"],
                     "source": payload["domains"]["source"]["accuracy"],
                     "target": payload["domains"]["target"]["accuracy"]})
    if not rows:
        raise CliError(f"no eval.json files under {in_dir}")
    text = aggregate_rows(rows)
    if args.out:
        _atomic_write(_out_path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genuda",
        description="Generative UDA lab: synthetic corpora, continued "
                    "pre-training schedules, invariance baselines, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic domain pair")
    p.add_argument("spec", help="SynthSpec key-value file")
    p.add_argument("out", help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pmi", help="word-class PMI table as CSV")
    p.add_argument("corpus", help="labeled corpus file")
    p.add_argument("out", help="output CSV path")
    p.add_argument("--format", default="tsv", choices=("tsv", "jsonl"))
    p.add_argument("--classes", default="Negative,Positive")
    p.add_argument("--k-percent", type=float, default=15.0)
    p.add_argument("--min-freq", type=int, default=10)
    p.set_defaults(func=cmd_pmi)

    p = sub.add_parser("train", help="run one training schedule")
    p.add_argument("config", help="TrainConfig key-value file")
    p.add_argument("out", help="output run directory")
    p.add_argument("--force", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("run", help="run directory from train")
    p.add_argument("--pair", default=None, help="pair directory (default: config data.dir)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--masked-inference", default=None,
                   choices=("informative", "uninformative"))
    p.add_argument("--export-embeddings", default=None, metavar="CSV")
    p.add_argument("--out", default=None, help="write report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="axis sweep with per-seed runs")
    p.add_argument("axis", choices=("mask_rate", "shots", "schedule", "phase1_data"))
    p.add_argument("config", help="base TrainConfig key-value file")
    p.add_argument("out", help="output directory")
    p.add_argument("--values", default=None, help="comma list overriding the axis defaults")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate eval.json files into a CSV")
    p.add_argument("runs", help="directory of run directories")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
