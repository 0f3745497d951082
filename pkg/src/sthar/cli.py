"""Command-line entry point: ``sthar synth|train|eval|gradcheck|compare``.

Exit codes: 0 success, 1 failed check or comparison cell, 2 usage or
configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path


from .checkpoint import Checkpoint
from .checks import LEVELS, run_level
from .data import SPLIT_NAMES, DatasetManifest, load_dataset, split_by_subject, write_dataset, SplitSpec
from .errors import CheckpointError, ConfigError, ContractError, IngestionError, SthArError, TrainingError
from .models import MODEL_KINDS, ModelConfig
from .synth import SyntheticSpec, synth_generate
from .training import TrainConfig, evaluate, thread_limit, train

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
THREADS_ENV = "STHAR_THREADS"
CHECKPOINT_NAME = "checkpoint.sthck"
METRICS_NAME = "metrics.json"
CONFIG_NAME = "config.json"
TIMING_NAME = "timing.json"


class UsageError(SthArError):
    """Bad command-line usage detected after argument parsing."""


def env_threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    """Where clips come from: a dataset directory or an in-memory synthetic spec."""

    root: str | None = None
    synthetic: dict | None = None
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0

    def spec(self) -> SyntheticSpec:
        return SyntheticSpec.from_dict(self.synthetic or {})

    def validate(self, model: ModelConfig) -> "DataConfig":
        if self.root is not None and self.synthetic is not None:
            raise ConfigError("data.root and data.synthetic are mutually exclusive")
        ratios = tuple(float(r) for r in self.split_ratios)
        if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"data.split_ratios must be three non-negative numbers summing to 1, got {list(ratios)}")
        self.split_ratios = ratios
        if self.root is None:
            try:
                spec = self.spec().validate()
            except TypeError as exc:
                raise ConfigError(f"invalid data.synthetic: {exc}") from None
            if spec.frame_shape != model.frame_shape:
                raise ConfigError(f"synthetic frames {spec.frame_shape} != model frames {model.frame_shape}")
            if spec.clip_length < max(model.contexts):
                raise ConfigError(
                    f"synthetic clip_length {spec.clip_length} is shorter than context {max(model.contexts)}"
                )
            if len(spec.classes) != model.num_classes:
                raise ConfigError(f"synthetic data has {len(spec.classes)} classes, model expects {model.num_classes}")
        return self

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "synthetic": None if self.root is not None else self.spec().to_dict(),
            "split_ratios": list(self.split_ratios),
            "split_seed": self.split_seed,
        }


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": self.data.to_dict()}


def parse_value(text: str):
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_override(tree: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict (creating levels as needed)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    path, _, raw = assignment.partition("=")
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigError(f"override {assignment!r} has an empty key")
    node = tree
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if nxt is None:
            nxt = node[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {assignment!r}: {k!r} is not a section")
        node = nxt
    node[keys[-1]] = parse_value(raw)


def read_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        tree = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(tree, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return tree


def build_run_config(tree: dict) -> RunConfig:
    """Validate a config tree (sections model/train/data) into a RunConfig."""
    unknown = set(tree) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        model = ModelConfig.from_dict(tree.get("model") or {})
        train_cfg = TrainConfig.from_dict(tree.get("train") or {})
        data_tree = dict(tree.get("data") or {})
        unknown = set(data_tree) - {"root", "synthetic", "split_ratios", "split_seed"}
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        data = DataConfig(**data_tree)
    except TypeError as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    try:
        model.validate()
        train_cfg.validate()
    except TypeError as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    data.validate(model)
    return RunConfig(model, train_cfg, data)


def load_data(data: DataConfig) -> tuple[DatasetManifest, dict]:
    if data.root is not None:
        manifest = load_dataset(data.root)
        info = {"source": "directory", "root": str(data.root)}
    else:
        spec = data.spec()
        manifest = synth_generate(spec)
        info = {"source": "synthetic", "spec": spec.to_dict()}
    info["fingerprint"] = manifest.fingerprint()
    return manifest, info


def make_split(manifest: DatasetManifest, data: DataConfig) -> SplitSpec:
    return split_by_subject(manifest, data.split_ratios, data.split_seed)


# ---------------------------------------------------------------------------
# output helpers


def prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    tree = read_config_file(args.spec)
    for assignment in args.set or []:
        apply_override(tree, assignment)
    try:
        spec = SyntheticSpec.from_dict(tree).validate()
    except TypeError as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    manifest = synth_generate(spec)
    # build the tree next to the target, then swap it in
    staging = out.with_name(out.name + ".staging")
    try:
        if staging.exists():
            shutil.rmtree(staging)
        write_dataset(manifest, staging, spec.format)
        if out.exists():
            shutil.rmtree(out) if out.is_dir() else out.unlink()
        os.replace(staging, out)
    except OSError as exc:
        shutil.rmtree(staging, ignore_errors=True)
        raise UsageError(f"cannot write dataset to {out}: {exc.strerror or exc}") from None
    log(f"wrote {len(manifest.records)} clips in {len(manifest.classes)} classes to {out}")
    return EXIT_OK


def _train_tree(args) -> dict:
    tree = read_config_file(args.config)
    for assignment in args.set or []:
        apply_override(tree, assignment)
    model = tree.setdefault("model", {}) or {}
    tree["model"] = model
    if args.model is not None:
        model["kind"] = args.model
    if args.context is not None:
        model["context"] = args.context
    if args.seed is not None:
        model["seed"] = args.seed
        tree["train"] = dict(tree.get("train") or {}, seed=args.seed)
    return tree


def _run_training(run: RunConfig, manifest, split, info, out: Path) -> tuple[Checkpoint, object]:
    t0 = time.perf_counter()

    def progress(s):
        val = "-" if s.val_accuracy is None else f"{s.val_accuracy:.3f}"
        loss = "-" if s.train_loss is None else f"{s.train_loss:.4f}"
        log(f"epoch {s.epoch:3d}  step {s.steps:5d}  loss {loss}  train {s.train_accuracy:.3f}  val {val}")

    threads = None if run.train.deterministic else env_threads()
    with thread_limit(threads):
        ckpt, metrics = train(run.model, manifest, split, run.train, progress=progress, data_info=info)
    ckpt.data["split_ratios"] = list(run.data.split_ratios)
    ckpt.data["split_seed"] = run.data.split_seed
    ckpt.save(out / CHECKPOINT_NAME)
    write_atomic(out / METRICS_NAME, metrics.dumps())
    write_atomic(out / TIMING_NAME, dump_json({"seconds": time.perf_counter() - t0}))
    return ckpt, metrics


def cmd_train(args) -> int:
    run = build_run_config(_train_tree(args))
    out = prepare_out(Path(args.out), args.force)
    write_atomic(out / CONFIG_NAME, dump_json(run.to_dict()))
    manifest, info = load_data(run.data)
    split = make_split(manifest, run.data)
    _, metrics = _run_training(run, manifest, split, info, out)
    acc = "n/a" if metrics.accuracy is None else f"{metrics.accuracy:.4f}"
    log(f"best epoch {metrics.best_epoch}, test accuracy {acc}; outputs in {out}")
    return EXIT_OK


def _stored_split(ckpt: Checkpoint) -> SplitSpec | None:
    s = ckpt.data.get("split")
    if not s:
        return None
    return SplitSpec(tuple(s["train"]), tuple(s["val"]), tuple(s["test"]))


def cmd_eval(args) -> int:
    if args.split not in SPLIT_NAMES + ("all",):
        raise UsageError(f"unknown split {args.split!r}; expected one of {SPLIT_NAMES + ('all',)}")
    ckpt = Checkpoint.load(args.checkpoint)
    if args.context is not None and args.context != ckpt.model_config.context:
        raise UsageError(
            f"checkpoint was trained at context length {ckpt.model_config.context}, not {args.context}"
        )
    if args.data is not None:
        manifest = load_dataset(args.data)
    else:
        source = ckpt.data.get("source")
        if source == "synthetic":
            manifest = synth_generate(SyntheticSpec.from_dict(ckpt.data["spec"]))
        elif source == "directory":
            manifest = load_dataset(ckpt.data["root"])
        else:
            raise UsageError("checkpoint records no data source; pass --data")
    if args.split == "all":
        split = None
    elif args.ratios is not None or args.split_seed is not None:
        ratios = args.ratios or ckpt.data.get("split_ratios", (0.6, 0.2, 0.2))
        seed = args.split_seed if args.split_seed is not None else ckpt.data.get("split_seed", 0)
        split = split_by_subject(manifest, ratios, seed)
    else:
        split = _stored_split(ckpt) or split_by_subject(manifest)
    metrics = evaluate(ckpt, manifest, split, ckpt.model_config.context, split_name=args.split)
    sys.stdout.write(metrics.dumps())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    levels = LEVELS if args.level == "all" else (args.level,)
    failed = []
    t0 = time.perf_counter()
    with thread_limit(1):
        for level in levels:
            for r in run_level(level, args.h):
                status = "PASS" if r.passed else "FAIL"
                print(f"{status}  {level:6s}  {r.name:32s}  max_rel_error={r.max_rel_error:.3e}  "
                      f"tol={r.tolerance:.0e}  n={r.checked}", flush=True)
                if not r.passed:
                    failed.append(r.name)
    print(f"{len(failed)} failing check(s) in {time.perf_counter() - t0:.1f}s", flush=True)
    if failed:
        print("failing: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _parse_list(text: str, cast, what: str) -> list:
    try:
        items = [cast(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {what} list {text!r}") from None
    if not items:
        raise UsageError(f"empty {what} list")
    if len(set(items)) != len(items):
        raise UsageError(f"duplicate entries in {what} list {text!r}")
    return items


def _compare_cell(tree: dict, model: str, context: int, cell_dir: str, manifest=None) -> dict:
    """Train and evaluate one grid cell; failures are reported, not raised."""
    t0 = time.perf_counter()
    result = {"context": context, "model": model, "accuracy": None, "seconds": None, "status": "ok", "error": None}
    try:
        cell_tree = copy.deepcopy(tree)
        cell_tree.setdefault("model", {})
        cell_tree["model"]["kind"] = model
        cell_tree["model"]["context"] = context
        run = build_run_config(cell_tree)
        if manifest is None:
            manifest, info = load_data(run.data)
        else:
            manifest, info = manifest
        split = make_split(manifest, run.data)
        out = Path(cell_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_atomic(out / CONFIG_NAME, dump_json(run.to_dict()))
        _, metrics = _run_training(run, manifest, split, info, out)
        result["accuracy"] = metrics.accuracy
        if metrics.accuracy is None:
            raise ContractError("the test split holds no clips")
    except (SthArError, ValueError, ArithmeticError, OSError) as exc:
        result["status"] = "failed"
        result["error"] = f"{type(exc).__name__}: {exc}"
        result["accuracy"] = None
    result["seconds"] = time.perf_counter() - t0
    return result


def comparison_csv(cells: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["context", "model", "accuracy", "seconds"])
    for c in cells:
        acc = "" if c["accuracy"] is None else f"{c['accuracy']:.6f}"
        w.writerow([c["context"], c["model"], acc, f"{c['seconds']:.3f}"])
    return buf.getvalue()


def comparison_table(cells: list[dict], contexts: list[int], models: list[str]) -> dict:
    """Rows are context lengths, columns are models."""
    lookup = {(c["context"], c["model"]): c for c in cells}
    return {
        "rows": contexts,
        "columns": models,
        "accuracy": [[lookup[(t, m)]["accuracy"] for m in models] for t in contexts],
        "seconds": [[lookup[(t, m)]["seconds"] for m in models] for t in contexts],
    }


def cmd_compare(args) -> int:
    contexts = _parse_list(args.contexts, int, "context")
    models = _parse_list(args.models, str, "model")
    for m in models:
        if m not in MODEL_KINDS:
            raise UsageError(f"unknown model {m!r}; expected one of {MODEL_KINDS}")
    tree = read_config_file(args.config)
    for assignment in args.set or []:
        apply_override(tree, assignment)
    tree["model"] = dict(tree.get("model") or {})
    tree["model"]["contexts"] = sorted(set(contexts) | set(tree["model"].get("contexts") or contexts))
    # validate every cell's config before any compute
    for m in models:
        for t in contexts:
            build_run_config(copy.deepcopy({**tree, "model": {**tree["model"], "kind": m, "context": t}}))
    out = prepare_out(Path(args.out), args.force)
    first = build_run_config(copy.deepcopy({**tree, "model": {**tree["model"], "context": contexts[0]}}))
    write_atomic(out / CONFIG_NAME, dump_json({"contexts": contexts, "models": models, "base": first.to_dict()}))

    grid = [(t, m) for t in contexts for m in models]
    threads = env_threads() or 1
    workers = 1 if first.train.deterministic else min(threads, len(grid))
    cell_dirs = {(t, m): str(out / "cells" / f"{m}_ctx{t}") for t, m in grid}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_compare_cell, tree, m, t, cell_dirs[(t, m)]) for t, m in grid]
            cells = [f.result() for f in futures]
    else:
        shared = load_data(first.data)
        cells = []
        for t, m in grid:
            log(f"--- {m} at context {t}")
            cells.append(_compare_cell(tree, m, t, cell_dirs[(t, m)], shared))
    cells.sort(key=lambda c: (contexts.index(c["context"]), models.index(c["model"])))
    report = {
        "contexts": contexts,
        "models": models,
        "cells": cells,
        "table": comparison_table(cells, contexts, models),
    }
    write_atomic(out / "comparison.csv", comparison_csv(cells))
    write_atomic(out / "comparison.json", dump_json(report))
    sys.stdout.write(comparison_csv(cells))
    failed = [c for c in cells if c["status"] != "ok"]
    for c in failed:
        log(f"cell {c['model']} @ {c['context']} failed: {c['error']}")
    return EXIT_FAILED if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sthar", description="Spatio-temporal action recognition toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic action dataset")
    s.add_argument("--spec", help="JSON file with synthetic spec fields (defaults otherwise)")
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a spec field")
    s.add_argument("--force", action="store_true", help="replace an existing output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config", help="JSON run config with model/train/data sections")
    s.add_argument("--model", choices=MODEL_KINDS)
    s.add_argument("--context", type=int)
    s.add_argument("--seed", type=int, help="seed for parameter init and batch order")
    s.add_argument("--set", action="append", metavar="KEY.PATH=VALUE", help="override a config value")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="overwrite outputs in a non-empty directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint; metrics JSON on stdout")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="dataset directory (default: the checkpoint's recorded data source)")
    s.add_argument("--split", default="test", help="train, val, test or all")
    s.add_argument("--context", type=int)
    s.add_argument("--ratios", type=lambda t: [float(v) for v in t.split(",")], help="re-split with these ratios")
    s.add_argument("--split-seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--level", choices=LEVELS + ("all",), default="all")
    s.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("compare", help="train/evaluate a models × contexts grid")
    s.add_argument("--config", help="JSON run config shared by every cell")
    s.add_argument("--contexts", default="12,18,24")
    s.add_argument("--models", default="hybrid,vit_only,cnn_baseline")
    s.add_argument("--set", action="append", metavar="KEY.PATH=VALUE")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ContractError, CheckpointError, IngestionError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
