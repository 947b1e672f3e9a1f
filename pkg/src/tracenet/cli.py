"""``tracenet`` command line: gen, embed, train, eval, baseline, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .embed import EmbeddingError, load_vectors, save_vectors
from .graph import _load_schema
from .traces import CORPUS_HEADER, TraceCaps

log = logging.getLogger("tracenet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

# published MAE on the random-graph corpus, shown for context only
REFERENCE = {
    "source": "published ablation table, RGG column; not comparable to synthetic desk-scale runs",
    "tracenet": {"1": 0.058, "2": 0.118, "3": 0.109},
    "tracenet_d": {"1": 0.067, "2": 0.137, "3": 0.137},
    "tracenet_none": {"1": 0.083, "2": 0.526, "3": 0.248},
    "tracenet_task3_all_corpora": {"RGG": 0.109, "SPR": 0.134, "IPN": 0.064, "ABM": 0.067},
}


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_json(path: Path, obj, schema: str | None = None) -> None:
    if schema is not None:
        jsonschema.validate(obj, _load_schema(schema))
    path.write_text(_dump(obj), encoding="utf-8")


def _derive(seed: int, *parts) -> int:
    return random.Random(repr((seed,) + parts)).getrandbits(63)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_rows(path: Path):
    from .forge import read_dataset

    with path.open(encoding="utf-8") as fh:
        return read_dataset(fh)


def _tasks(spec: str) -> list[int]:
    if spec == "all":
        return [1, 2, 3]
    try:
        tasks = sorted({int(t) for t in spec.split(",")})
    except ValueError:
        raise UsageError(f"--tasks expects 1,2,3 or 'all', got {spec!r}") from None
    if not tasks or not set(tasks) <= {1, 2, 3}:
        raise UsageError(f"--tasks expects 1,2,3 or 'all', got {spec!r}")
    return tasks


# --------------------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    from .forge import GenConfig, build_dataset, gen_graph, write_dataset

    out = _out(args)
    trees = [gen_graph(GenConfig(max_depth=args.max_depth, leaf_prob=args.leaf_prob, seed=_derive(args.seed, "tree", i)))
             for i in range(args.graphs)]
    ds = build_dataset(trees, args.variants, TraceCaps(args.max_traces, 200, args.seed), args.seed,
                       cross_pairs=args.cross_pairs, train_ratio=args.train_ratio)
    with (out / "dataset.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
        write_dataset(ds, fh)
    gold = np.array([p.gold for p in ds.pairs])
    counts, edges = np.histogram(gold, bins=args.bins, range=(0.0, 1.0))
    manifest = {
        "base_graphs": ds.n_base,
        "mutated_graphs": len(ds.trees) - ds.n_base,
        "pairs": len(ds.pairs),
        "train": len(ds.split("train")),
        "test": len(ds.split("test")),
        "seed": args.seed,
        "label_histogram": {"edges": [round(float(e), 10) for e in edges], "counts": [int(c) for c in counts]},
        "config": {"graphs": args.graphs, "variants": args.variants, "cross_pairs": args.cross_pairs,
                   "max_depth": args.max_depth, "leaf_prob": args.leaf_prob, "max_traces": args.max_traces,
                   "train_ratio": args.train_ratio},
    }
    _write_json(out / "manifest.json", manifest, "manifest.schema.json")
    print(f"{manifest['base_graphs']} base + {manifest['mutated_graphs']} mutated graphs, "
          f"{manifest['pairs']} pairs ({manifest['train']} train / {manifest['test']} test) -> {out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    from .pipeline import CorpusConfig, node_corpus, train_vectors, unique_trees, word_corpus

    out = _out(args)
    rows = _read_rows(Path(args.dataset or out / "dataset.jsonl"))
    cfg = CorpusConfig(args.mode, args.max_traces, 200, args.walk_len, args.node_tokens, args.seed)
    corpus = node_corpus(unique_trees(rows), cfg)
    with (out / f"corpus-{args.mode}.txt").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(CORPUS_HEADER + "\n")
        fh.writelines(" ".join(s) + "\n" for s in corpus)
    nodes = train_vectors(corpus, args.dim, args.window, args.epochs, args.lr, args.seed, args.workers)
    (out / f"nodes-{args.mode}.vec").write_bytes(save_vectors(nodes))
    print(f"{len(nodes)} node vectors (dim {nodes.dim}) from {len(corpus)} {args.mode} sentences")
    if not args.no_words:
        words = train_vectors(word_corpus(rows), args.dim, args.window, args.word_epochs, args.lr, args.seed,
                              args.workers)
        (out / "words.vec").write_bytes(save_vectors(words))
        print(f"{len(words)} word vectors (dim {words.dim})")
    return EXIT_OK


def _model_config(args, embed_dim: int, task: int):
    from .model import ModelConfig
    from .pipeline import TASK_MODES

    widths = tuple(int(w) for w in str(args.widths).split(","))
    return ModelConfig(embed_dim=embed_dim, filter_widths=widths, n_filters=args.filters, hidden_units=args.hidden,
                       max_tokens=args.max_tokens, max_nodes=args.max_nodes, gamma=args.gamma,
                       batch_size=args.batch_size, max_epochs=args.epochs, lr=args.lr, lr_late=args.lr_late,
                       lr_drop_epoch=args.lr_drop_epoch, patience=args.patience, val_fraction=args.val_fraction,
                       seed=args.seed, semantic_mode=args.semantic_mode, task_mode=TASK_MODES[task],
                       node_tokens=args.node_tokens)


def _load_table(path: Path):
    return load_vectors(path.read_bytes())


def cmd_train(args) -> int:
    from .model import TraceNetModel, evaluate, save_model, train
    from .pipeline import encode_rows

    tasks = _tasks(args.tasks)
    out = _out(args)
    dataset = Path(args.dataset or out / "dataset.jsonl")
    rows = [r for r in _read_rows(dataset) if r.split == "train"]
    words_path = Path(args.words or out / "words.vec")
    words = _load_table(words_path)
    nodes_path = None
    nodes = None
    if args.semantic_mode != "none":
        nodes_path = Path(args.nodes or out / f"nodes-{args.semantic_mode}.vec")
        nodes = _load_table(nodes_path)
        if nodes.dim != words.dim:
            raise UsageError(f"node vectors have dim {nodes.dim} but word vectors have dim {words.dim}")
    for task in tasks:
        cfg = _model_config(args, words.dim, task)
        encoded = encode_rows(rows, nodes, words, cfg)
        t0 = time.perf_counter()
        model = TraceNetModel(cfg)
        result = train(model, encoded, cfg)
        train_mae, _ = evaluate(model, encoded)
        task_dir = out / f"task{task}"
        task_dir.mkdir(exist_ok=True)
        save_model(model, task_dir / "model", nodes, words)
        history = {
            "best_epoch": result.best_epoch,
            "epochs": [{"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss, "lr": r.lr}
                       for r in result.history],
            "train_mae": train_mae,
            "inputs": {"dataset": str(dataset), "nodes": None if nodes_path is None else str(nodes_path),
                       "words": str(words_path)},
        }
        _write_json(task_dir / "history.json", history)
        _write_json(task_dir / "config.json", cfg.to_json())
        print(f"task {task}: {len(result.history)} epochs (best {result.best_epoch}), train MAE {train_mae:.4f}, "
              f"{time.perf_counter() - t0:.1f}s -> {task_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .model import evaluate, load_model, table_hash
    from .pipeline import encode_rows

    out = _out(args)
    model_dir = Path(args.model_dir or out)
    report_rows = []
    for task in _tasks(args.tasks):
        task_dir = model_dir / f"task{task}"
        model, meta = load_model(task_dir / "model")
        history = json.loads((task_dir / "history.json").read_text(encoding="utf-8"))
        inputs = history["inputs"]
        rows = [r for r in _read_rows(Path(args.dataset or inputs["dataset"])) if r.split == args.split]
        words = _load_table(Path(args.words or inputs["words"]))
        nodes = None
        if model.config.semantic_mode != "none":
            nodes = _load_table(Path(args.nodes or inputs["nodes"]))
        for kind, table in (("node", nodes), ("word", words)):
            if table_hash(table) != meta["vocab_hashes"][kind]:
                raise UsageError(f"{kind} vectors do not match the ones task {task} was trained with")
        t0 = time.perf_counter()
        mae, _ = evaluate(model, encode_rows(rows, nodes, words, model.config))
        report_rows.append({
            "task": task,
            "semantic_mode": model.config.semantic_mode,
            "split": args.split,
            "mae": mae,
            "n_examples": len(rows),
            "wall_time_s": round(time.perf_counter() - t0, 3),
            "seed": model.config.seed,
        })
    report = {"rows": report_rows, "reference": REFERENCE}
    _write_json(out / "metrics.json", report, "metrics.schema.json")
    print(f"{'task':<6}{'semantic':<11}{'split':<7}{'MAE':>8}{'n':>7}{'time_s':>9}")
    for r in report_rows:
        print(f"{r['task']:<6}{r['semantic_mode']:<11}{r['split']:<7}{r['mae']:>8.4f}{r['n_examples']:>7}"
              f"{r['wall_time_s']:>9.2f}")
    return EXIT_OK


def random_checker(n_samples: int, seed: int, riemann_n: int = 1000) -> dict:
    """Monte-Carlo estimate of E|p - q| for independent uniform p, q.

    Also reports the exact Riemann sum ``sum_{i,j} |i - j| / n^3`` and the
    closed form ``1/3 - 1/(2 n^2)`` at ``riemann_n``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    p = rng.random(n_samples)
    q = rng.random(n_samples)
    estimate = float(np.mean(np.abs(p - q)))
    n = riemann_n
    return {
        "n_samples": n_samples,
        "seed": seed,
        "estimate": estimate,
        "distance_from_third": abs(estimate - 1.0 / 3.0),
        "riemann_n": n,
        "riemann_sum": (n * n - 1) / (3.0 * n * n),
        "displayed_partial_sum": 1.0 / 3.0 - 1.0 / (2.0 * n * n),
    }


def cmd_baseline(args) -> int:
    out = _out(args)
    report = random_checker(args.samples, args.seed, args.riemann_n)
    _write_json(out / "baseline.json", report, "baseline.schema.json")
    print(f"E|p-q| ~ {report['estimate']:.6f} (n={report['n_samples']}, |est - 1/3| = "
          f"{report['distance_from_third']:.2e}); closed form at n={report['riemann_n']}: "
          f"{report['displayed_partial_sum']:.10f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, run_gradchecks, summarize

    worst = summarize(run_gradchecks(range(args.seeds), fault=args.inject_fault))
    for c in worst.values():
        print(f"{c.layer:<22}{'ok' if c.passed else 'FAIL':<6}worst {c.worst:.2e} ({c.param}, seed {c.seed})")
    failed = [c for c in worst.values() if not c.passed]
    if failed:
        bad = max(failed, key=lambda c: c.worst)
        raise CheckFailed(f"gradient check failed: worst offender {bad.layer}.{bad.param} "
                          f"rel err {bad.worst:.2e} >= {TOLERANCE:g}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser

COMMANDS = {
    "gen": cmd_gen,
    "embed": cmd_embed,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
}


def _global_flags(p: argparse.ArgumentParser, defaults: bool) -> None:
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    p.add_argument("--workers", type=int, default=d(1), help="worker threads for embedding (default 1)")
    p.add_argument("--out-dir", default=d("."), help="output directory (default .)")
    p.add_argument("--config", default=d(None), help="JSON file of option defaults, keyed by option name")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracenet", description="Process graph / text consistency toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a labelled dataset")
    p.add_argument("--graphs", type=int, default=10)
    p.add_argument("--variants", type=int, default=3, help="mutated variants per base graph")
    p.add_argument("--cross-pairs", type=int, default=1)
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--leaf-prob", type=float, default=0.5)
    p.add_argument("--max-traces", type=int, default=1000)
    p.add_argument("--train-ratio", type=float, default=0.8)
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("embed", parents=[common], help="train node and word vectors")
    p.add_argument("--dataset")
    p.add_argument("--mode", choices=("tracewalk", "deepwalk"), default="tracewalk")
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--word-epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.025)
    p.add_argument("--max-traces", type=int, default=200, help="traces (or walks) per graph")
    p.add_argument("--walk-len", type=int, default=0, help="deepwalk length; 0 = mean trace length")
    p.add_argument("--node-tokens", choices=("instance", "type"), default="instance")
    p.add_argument("--no-words", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train TraceNet")
    p.add_argument("--dataset")
    p.add_argument("--nodes")
    p.add_argument("--words")
    p.add_argument("--semantic-mode", choices=("tracewalk", "deepwalk", "none"), default="tracewalk")
    p.add_argument("--tasks", default="3")
    p.add_argument("--widths", default="2,3,4")
    p.add_argument("--filters", type=int, default=128)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--max-tokens", type=int, default=100)
    p.add_argument("--max-nodes", type=int, default=100)
    p.add_argument("--gamma", type=float, default=0.7)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.0002)
    p.add_argument("--lr-late", type=float, default=0.0001)
    p.add_argument("--lr-drop-epoch", type=int, default=7000)
    p.add_argument("--patience", type=int, default=200)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--node-tokens", choices=("instance", "type"), default="instance")

    p = sub.add_parser("eval", parents=[common], help="evaluate trained models")
    p.add_argument("--dataset")
    p.add_argument("--model-dir")
    p.add_argument("--nodes")
    p.add_argument("--words")
    p.add_argument("--tasks", default="3")
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("baseline", parents=[common], help="estimate a random checker's expected error")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--riemann-n", type=int, default=1000)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--inject-fault", action="store_true", help="corrupt one gradient per layer")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{known.config}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{known.config}: expected a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    targets = [parser, *subs.choices.values()]
    dests = {a.dest for t in targets for a in t._actions}
    unknown = sorted(set(cfg) - dests)
    if unknown:
        raise UsageError(f"{known.config}: unknown options {unknown}")
    for t in targets:
        own = {a.dest for a in t._actions}
        t.set_defaults(**{k: v for k, v in cfg.items() if k in own})


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"tracenet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"tracenet: error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tracenet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailed as exc:
        print(f"tracenet: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, EmbeddingError) as exc:
        if isinstance(exc, OSError) and exc.filename is None:
            raise
        print(f"tracenet: error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_FAIL
    except (ValueError, jsonschema.ValidationError) as exc:
        print(f"tracenet: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
