"""deltaforge command line.

Exit codes: 0 success, 1 usage error, 2 data error. With ``--json`` errors
are written to stderr as one JSON object on a single line.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import delta as delta_mod
from . import merge_engine as me
from . import onebit, router, storagemeter, synthlab
from .errors import DeltaForgeError, IoFailure, MissingInput, RecipeError, UnknownTask
from .tensor_store import atomic_write_bytes, load_checkpoint, save_checkpoint

POSITIONS = [p.value for p in onebit.Position]
FAMILIES = sorted(onebit.FAMILY_POSITIONS) + ["custom"]


class DataError(DeltaForgeError):
    code = "data_error"


class UsageError(Exception):
    def __init__(self, message, usage=""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _json_flag(p):
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                   help="report errors on stderr as single-line JSON")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="deltaforge", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--json", action="store_true", help="report errors on stderr as single-line JSON")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("delta", help="extract a task vector (fine-tuned minus base)", formatter_class=fmt)
    p.add_argument("--sft", required=True, help="fine-tuned checkpoint")
    p.add_argument("--pre", required=True, help="pre-trained checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--task", required=True, help="task id, e.g. chat, math, code")
    p.add_argument("--exclude-embeddings", action="store_true",
                   help="leave embed_tokens/lm_head out of the task vector")
    _json_flag(p)

    p = sub.add_parser("quantize", help="1-bit quantize selected modules of a task vector", formatter_class=fmt)
    p.add_argument("--delta", help="delta/v1 task-vector file")
    p.add_argument("--sft", help="fine-tuned checkpoint (with --pre, instead of --delta)")
    p.add_argument("--pre")
    p.add_argument("--task", help="task id (defaults to the one stored in --delta)")
    p.add_argument("--out", required=True)
    p.add_argument("--position", choices=POSITIONS,
                   help="module class to quantize; default comes from --family and --task")
    p.add_argument("--family", choices=FAMILIES, default="custom")
    p.add_argument("--report", action="store_true", help="print the per-tensor quantization report")
    _json_flag(p)

    p = sub.add_parser(
        "merge", formatter_class=fmt,
        help="merge task vectors as described by a recipe",
        description=(
            "Method defaults: task_arithmetic lambda=1; dare lambda=0.5, drop_rate=0.5; "
            "ties mask_ratio=0.7, lambda=1; onebit inherits the ties defaults."
        ),
    )
    p.add_argument("--recipe", required=True, help="flat key/value recipe file")
    p.add_argument("--out", help="merged checkpoint path")
    p.add_argument("--task", help="selected task for onebit merges")
    p.add_argument("--router", help="router file used to pick the task from --text")
    p.add_argument("--text", help="input text to route")
    p.add_argument("--uncompressed-rest", action="store_true",
                   help="TIES-integrate full-precision vectors for the non-selected tasks")
    p.add_argument("--force-base", action="store_true", help="merge even if base hashes differ")
    p.add_argument("--print-recipe", action="store_true", help="print the effective recipe after defaulting")
    _json_flag(p)

    p = sub.add_parser("route-train", help="train the task router on JSON-lines text files", formatter_class=fmt)
    for task in ("chat", "math", "code"):
        p.add_argument(f"--{task}", help=f"JSON-lines file of {task} examples (field 'text')")
    p.add_argument("--task-file", action="append", default=[], metavar="LABEL=PATH",
                   help="additional labelled JSON-lines file")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=800, help="examples used per task")
    p.add_argument("--lr", type=float, default=5e-5, help="SGD learning rate")
    p.add_argument("--epochs", type=int, default=20, help="passes over the data")
    p.add_argument("--batch", type=int, default=64, help="minibatch size")
    p.add_argument("--seed", type=int, default=0, help="init and shuffle seed")
    p.add_argument("--dim", type=int, default=1024, help="hashed feature dimension")
    p.add_argument("--hidden", type=int, nargs=2, default=[256, 128], help="hidden layer widths")
    _json_flag(p)

    p = sub.add_parser("route", help="route one input to a task", formatter_class=fmt)
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text")
    src.add_argument("--features", help="JSON file holding a precomputed feature vector")
    _json_flag(p)

    p = sub.add_parser("report", help="storage accounting for a recipe", formatter_class=fmt)
    p.add_argument("--recipe", required=True)
    p.add_argument("--arch", choices=sorted(storagemeter.ARCHS),
                   help="analytic mode for this architecture; otherwise count bytes of the recipe's files")
    p.add_argument("--csv", default="storage_report.csv", help="CSV output path")
    _json_flag(p)

    p = sub.add_parser("lab", help="generate the synthetic base, experts and suite", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=synthlab.SHIPPED_SEED, help="lab seed")
    p.add_argument("--out", required=True, help="output directory")
    _json_flag(p)

    p = sub.add_parser("lab-eval", help="evaluate a checkpoint on the synthetic suite", formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--suite", required=True)
    _json_flag(p)

    p = sub.add_parser("inspect", help="summarise a tensor file", formatter_class=fmt)
    p.add_argument("path")
    _json_flag(p)
    return parser


# --- helpers -----------------------------------------------------------------------


def _load_source(path: str, pre, task: str):
    """A recipe source: onebit-delta file, delta file, or fine-tuned checkpoint."""
    if not Path(path).exists():
        raise MissingInput(f"source for {task!r} not found: {path}")
    ckpt = load_checkpoint(path)
    fmt = ckpt.metadata.get("format")
    if fmt == onebit.FORMAT:
        q = onebit.QuantizedTaskVector.from_checkpoint(ckpt)
        q.task_id = task
        return q
    if fmt == delta_mod.FORMAT:
        tv = delta_mod.TaskVector.from_checkpoint(ckpt)
        tv.task_id = task
        return tv
    return delta_mod.extract(ckpt, pre, task)


def _as_task_vector(src):
    return onebit.dequantize(src) if isinstance(src, onebit.QuantizedTaskVector) else src


def _write(path, ckpt):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, path)


# --- commands --------------------------------------------------------------------


def cmd_delta(args):
    sft, pre = load_checkpoint(args.sft), load_checkpoint(args.pre)
    tv = delta_mod.extract(sft, pre, args.task, exclude_embeddings=args.exclude_embeddings)
    _write(args.out, tv.to_checkpoint())
    print(f"wrote {args.out}: {len(tv)} tensors, task={tv.task_id}, base={tv.base_hash[:12]}")


def cmd_quantize(args):
    if args.delta:
        tv = delta_mod.load_task_vector(args.delta)
    elif args.sft and args.pre:
        if not args.task:
            raise UsageError("--task is required with --sft/--pre")
        tv = delta_mod.extract(load_checkpoint(args.sft), load_checkpoint(args.pre), args.task)
    else:
        raise UsageError("give --delta, or --sft with --pre")
    if args.task:
        tv.task_id = args.task
    pattern = onebit.default_pattern(args.family, tv.task_id, args.position)
    q = onebit.quantize(tv, pattern)
    _write(args.out, q.to_checkpoint())
    if args.report:
        print(q.report.format())
    print(f"wrote {args.out}: position={pattern.position.value}, quantized={len(q.signs)}, "
          f"passthrough={len(q.passthrough)}, bytes {q.report.original_bytes} -> {q.report.quantized_bytes}")


def _selected_task(args, tasks):
    if args.task:
        return args.task
    if args.router and args.text is not None:
        model = router.load_router(args.router)
        label, p = router.route_text(model, args.text)
        print(f"routed to {label} (p={float(np.max(p)):.4f})")
        return label
    raise UsageError("onebit merges need --task, or --router with --text")


def cmd_merge(args):
    recipe = me.load_recipe(args.recipe).effective()
    if args.print_recipe:
        print(recipe.dumps(), end="")
        if not args.out:
            return
    if not args.out:
        raise UsageError("--out is required")
    if not recipe.base:
        raise MissingInput("recipe has no base")
    if not recipe.sources:
        raise MissingInput("recipe has no sources.<task> entries")
    pre = load_checkpoint(recipe.base)
    sources = {t: _load_source(p, pre, t) for t, p in sorted(recipe.sources.items())}
    force = args.force_base

    if recipe.method is me.Method.ONEBIT:
        selected = _selected_task(args, sources)
        if selected not in sources:
            raise UnknownTask(f"selected task {selected!r} not among {sorted(sources)}")
        qtvs = []
        for t, src in sources.items():
            if isinstance(src, onebit.QuantizedTaskVector):
                qtvs.append(src)
            else:
                pattern = onebit.default_pattern(recipe.family, t, recipe.positions.get(t))
                qtvs.append(onebit.quantize(src, pattern))
        rest = None
        if args.uncompressed_rest:
            rest = {}
            for t, src in sources.items():
                if t == selected:
                    continue
                if isinstance(src, onebit.QuantizedTaskVector):
                    raise RecipeError(f"--uncompressed-rest needs a full-precision source for {t!r}")
                rest[t] = src
        merged = me.onebit_merge(pre, qtvs, selected, recipe.mask_ratio, recipe.lam, rest, force)
    else:
        tvs = [_as_task_vector(s) for s in sources.values()]
        if recipe.method is me.Method.TASK_ARITHMETIC:
            merged = me.task_arithmetic(pre, tvs, recipe.lam, force)
        elif recipe.method is me.Method.TIES:
            merged = me.ties_merge(pre, tvs, recipe.mask_ratio, recipe.lam, force)
        else:
            merged = me.dare_merge(pre, tvs, recipe.drop_rate, recipe.lam, recipe.seed, force)
    merged.provenance["recipe"] = recipe.to_dict()
    _write(args.out, merged.stamped())
    print(f"wrote {args.out}: method={recipe.method.value}"
          + (f", selected={merged.provenance['selected']}" if "selected" in merged.provenance else ""))


def cmd_route_train(args):
    files = {t: getattr(args, t) for t in ("chat", "math", "code") if getattr(args, t)}
    for item in args.task_file:
        label, sep, path = item.partition("=")
        if not sep or not label or not path:
            raise UsageError(f"--task-file expects LABEL=PATH, got {item!r}")
        files[label] = path
    for label, path in files.items():
        if not Path(path).exists():
            raise MissingInput(f"{label}: no such file {path}")
    dataset = router.RoutingDataset.from_jsonl(files, limit=args.samples)
    cfg = router.FeatureExtractorConfig(dim=args.dim)
    model = router.train_on_dataset(
        dataset, cfg, class_labels=list(files), lr=args.lr, epochs=args.epochs,
        batch=args.batch, seed=args.seed, hidden=tuple(args.hidden),
    )
    _write(args.out, router.to_checkpoint(model))
    counts = ", ".join(f"{k}={v}" for k, v in dataset.counts.items())
    print(f"wrote {args.out}: labels={','.join(model.class_labels)} ({counts}), "
          f"train accuracy {model.train_accuracy:.4f}")


def cmd_route(args):
    model = router.load_router(args.model)
    if args.features:
        x = np.asarray(json.loads(Path(args.features).read_text()), dtype=np.float32)
        p = router.forward(model, x, "eval")
        label = model.class_labels[int(np.argmax(p))]
    else:
        label, p = router.route_text(model, args.text)
    print(label)
    print(json.dumps({lab: round(float(v), 6) for lab, v in zip(model.class_labels, p)}))


def cmd_report(args):
    recipe = me.load_recipe(args.recipe)
    report = storagemeter.measure(recipe, args.arch)
    print(report.format())
    atomic_write_bytes(args.csv, report.to_csv().encode("utf-8"))
    print(f"wrote {args.csv}")


def cmd_lab(args):
    info = synthlab.write_lab(args.out, args.seed)
    suite = info["suite"]
    print(f"lab written to {args.out} in {info['seconds']:.1f}s (data seed {suite.data_seed})")
    print("pre: " + json.dumps(suite.pre_accuracy, sort_keys=True))
    for task, acc in suite.expert_accuracy.items():
        print(f"expert {task}: " + json.dumps(acc, sort_keys=True))


def cmd_lab_eval(args):
    suite = synthlab.SyntheticTaskSuite.load(args.suite)
    acc = synthlab.evaluate(load_checkpoint(args.ckpt), suite)
    print(json.dumps(acc, sort_keys=True))


def inspect_summary(path) -> str:
    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    dtypes = Counter(t.dtype for t in ckpt.tensors.values())
    lines = [
        f"file: {path}",
        f"format: {meta.get('format', 'checkpoint')}",
        f"tensors: {len(ckpt)}",
        "dtypes: " + ", ".join(f"{k}={v}" for k, v in sorted(dtypes.items())),
        f"total bytes: {ckpt.nbytes}",
    ]
    fmt = meta.get("format")
    if fmt == onebit.FORMAT:
        q = onebit.QuantizedTaskVector.from_checkpoint(ckpt)
        lines.append(f"position: {meta.get('position')}")
        lines.append(f"quantized matrices: {len(q.signs)}")
        lines.append(f"passthrough tensors: {len(q.passthrough)}")
        lines.append(f"mean alpha: {q.mean_scale():.6g}")
    elif fmt == router.FORMAT:
        lines.append("labels: " + ", ".join(meta.get("labels", "").split(",")))
        lines.append(f"dims: {meta.get('dims')}")
    lines.append("metadata:")
    for k in sorted(meta):
        v = meta[k]
        lines.append(f"  {k}: {v if len(v) <= 120 else v[:117] + '...'}")
    return "\n".join(lines)


def cmd_inspect(args):
    print(inspect_summary(args.path))


COMMANDS = {
    "delta": cmd_delta,
    "quantize": cmd_quantize,
    "merge": cmd_merge,
    "route-train": cmd_route_train,
    "route": cmd_route,
    "report": cmd_report,
    "lab": cmd_lab,
    "lab-eval": cmd_lab_eval,
    "inspect": cmd_inspect,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json" in argv
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        COMMANDS[args.command](args)
    except UsageError as exc:
        if as_json:
            print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        else:
            if exc.usage:
                print(exc.usage, end="", file=sys.stderr)
            print(f"deltaforge: error: {exc}", file=sys.stderr)
        return 1
    except (DeltaForgeError, OSError, ValueError, KeyError) as exc:
        if isinstance(exc, OSError):
            exc = IoFailure(str(exc))
        elif not isinstance(exc, DeltaForgeError):
            exc = DataError(str(exc))
        if as_json:
            print(json.dumps(exc.to_dict()), file=sys.stderr)
        else:
            print(f"deltaforge: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
