"""Command-line driver: ``spot <subcommand> ...``.

Exit status is 0 on success, 2 for usage errors, 3 for configuration errors
and 1 for any other failure; failures print a single ``spot: error:`` line.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .analysis import (
    BASELINE,
    TransferTable,
    cluster_order,
    correlation_reports,
    export_heatmap,
    load_published_fixture,
    oracle_search,
    read_heatmap,
)
from .errors import ConfigError, SpotError
from .experiment import (
    METHODS,
    default_config,
    embed,
    load_config,
    open_library,
    read_embedding,
    read_similarity,
    save_config,
    sweep,
    train_source,
    transfer,
    write_similarity,
    Workspace,
)
from .library import write_checkpoint
from .prompt import SimilarityMetric
from .retrieval import rank_sources

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

_METRICS = {"avg": SimilarityMetric.AVG_TOKENS, "per-token": SimilarityMetric.PER_TOKEN}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out(line: str = "") -> None:
    sys.stdout.write(line + "\n")


def _fmt(x: float) -> str:
    return f"{x:.6g}"


# --- subcommands --------------------------------------------------------------


def cmd_init_config(args) -> int:
    path = Path(args.out)
    save_config(default_config(), path)
    _out(f"wrote {path}")
    return 0


def _config_overrides(args) -> dict:
    return {
        "source_steps": args.source_steps,
        "target_steps": getattr(args, "target_steps", None),
        "embed_step": getattr(args, "embed_step", None),
        "seeds": args.seeds,
        "learning_rate": args.learning_rate,
    }


def cmd_train_source(args) -> int:
    cfg = load_config(args.config).with_overrides(**_config_overrides(args))
    library = train_source(cfg, args.out)
    _out(f"wrote {len(library)} library entries to {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_embed(args) -> int:
    library = embed(args.library, embed_step=args.embed_step)
    _out(f"extracted {len(library)} task embeddings at step {library.embed_step}")
    return 0


def cmd_embed_target(args) -> int:
    cfg, library = open_library(args.library)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    emb = Workspace(cfg).target_embedding(args.target, seed)
    write_checkpoint(emb, args.out, overwrite=True)
    _out(f"wrote embedding of {args.target} (seed {seed}, step {emb.embed_step}) to {args.out}")
    return 0


def cmd_rank(args) -> int:
    cfg, library = open_library(args.library)
    target = read_embedding(args.target_embedding, library.embed_step)
    ranked = rank_sources(target, library, _METRICS[args.metric])
    _out("rank\ttask\tseed\tsimilarity")
    for r in ranked[: args.top] if args.top else ranked:
        _out(f"{r.rank}\t{r.entry.task_name}\t{r.entry.run_seed}\t{r.similarity:.6f}")
    return 0


def cmd_transfer(args) -> int:
    cfg, library = open_library(args.library)
    cfg = cfg.with_overrides(target_steps=args.target_steps)
    metric = _METRICS[args.metric] if args.metric else None
    outcome = transfer(
        cfg, library, args.target, args.method, args.k,
        seed=args.seed, metric=metric, mixture_checkpoint=args.mixture_checkpoint,
    )
    _out("run\tscore")
    for label, score in outcome.candidates:
        _out(f"{label}\t{score:.4f}")
    _out(f"target runs\t{outcome.target_runs}")
    _out(f"final score\t{outcome.score:.4f}")
    out = Path(args.out) if args.out else Path(args.library) / f"transfer-{args.target}-{args.method}-k{args.k}.ckpt"
    write_checkpoint(outcome.prompt, out, overwrite=True)
    _out(f"prompt\t{out}")
    return 0


def _load_table(args) -> TransferTable:
    if getattr(args, "fixture", None) == "paper":
        return load_published_fixture()
    if not args.results:
        raise UsageError("--results is required unless --fixture paper is given")
    return TransferTable.from_csv(args.results)


def _print_oracle(table: TransferTable) -> None:
    result = oracle_search(table)
    base = dict(zip(table.targets, table.baseline()))
    _out("target\tbest_source\tscore\tbaseline")
    for t in table.targets:
        _out(f"{t}\t{result.best_source[t]}\t{_fmt(result.best_score[t])}\t{_fmt(base[t])}")
    _out(f"oracle average\t{result.average:.1f}")
    _out(f"baseline average\t{result.baseline_average:.1f}")


def cmd_oracle(args) -> int:
    _print_oracle(_load_table(args))
    return 0


def cmd_sweep(args) -> int:
    cfg, library = open_library(args.library)
    cfg = cfg.with_overrides(target_steps=args.target_steps)
    metric = _METRICS[args.metric] if args.metric else None
    result = sweep(cfg, library, targets=args.targets, metric=metric)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.table.to_csv(out / "results.csv")
    write_similarity(result.similarity, out / "similarity.csv")
    export_heatmap(result.embedding_similarity, out / "embedding_similarity.csv",
                   row_ids=result.embedding_ids, col_ids=result.embedding_ids)
    _out(f"wrote results.csv, similarity.csv, embedding_similarity.csv to {out}")
    return 0


def cmd_analyze(args) -> int:
    table = _load_table(args)
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    rer_path = export_heatmap(table, out / "rer.csv")
    _out(f"wrote relative error reduction matrix to {rer_path}")
    _print_oracle(table)

    if args.embedding_similarity:
        rows, cols, mat = read_heatmap(args.embedding_similarity)
        path = export_heatmap(mat, out / "clustered_similarity.csv", row_ids=rows, col_ids=cols, clustered=True)
        _out(f"wrote clustered similarity heatmap to {path}")
    elif args.fixture == "paper":
        _out("the published table has no embedding similarities; clustered heatmap skipped")

    if args.similarity:
        srcs, tgts, rer = table.rer_matrix()
        rer_by_target = {t: {s: rer[i, j] for i, s in enumerate(srcs) if s != BASELINE}
                         for j, t in enumerate(tgts)}
        reports = correlation_reports(read_similarity(args.similarity), rer_by_target)
        with open(out / "correlation.tsv", "w", encoding="utf-8") as f:
            f.write("target\tn\tr\tp\n")
            for rep in reports:
                f.write(f"{rep.target}\t{len(rep.points)}\t{rep.r:.6f}\t{rep.p_value:.6g}\n")
        _out("target\tn\tr\tp")
        for rep in reports:
            _out(f"{rep.target}\t{len(rep.points)}\t{rep.r:.4f}\t{rep.p_value:.4g}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spot", description="Soft prompt transfer toolkit on a toy frozen model.")
    p.add_argument("--version", action="version", version=f"spot {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("init-config", help="write the default 16-task toy config")
    s.add_argument("--out", required=True, help="config JSON path to write")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("train-source", help="tune prompts on every source task x seed and build the library")
    s.add_argument("--config", required=True, help="experiment config JSON")
    s.add_argument("--out", required=True, help="library directory to create")
    s.add_argument("--source-steps", type=int, help="override source tuning steps")
    s.add_argument("--embed-step", type=int, help="override the task embedding step")
    s.add_argument("--seeds", type=int, nargs="+", help="override run seeds")
    s.add_argument("--learning-rate", type=float, help="override learning rate")
    s.set_defaults(func=cmd_train_source)

    s = sub.add_parser("embed", help="extract task embeddings at embed_step into the manifest")
    s.add_argument("--library", required=True, help="library directory")
    s.add_argument("--embed-step", type=int, help="use this step instead of the configured one")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("embed-target", help="compute a target task embedding checkpoint")
    s.add_argument("--library", required=True, help="library directory (provides the config)")
    s.add_argument("--target", required=True, help="target task name")
    s.add_argument("--seed", type=int, help="run seed (default: first config seed)")
    s.add_argument("--out", required=True, help="checkpoint file to write")
    s.set_defaults(func=cmd_embed_target)

    s = sub.add_parser("rank", help="rank library prompts against a target embedding (TSV)")
    s.add_argument("--library", required=True, help="library directory")
    s.add_argument("--target-embedding", required=True, help="target embedding checkpoint file")
    s.add_argument("--metric", choices=sorted(_METRICS), default="avg", help="similarity metric")
    s.add_argument("--top", type=int, help="print only the first N ranks")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("transfer", help="run a retrieval-based transfer method on a target task")
    s.add_argument("--library", required=True, help="library directory")
    s.add_argument("--target", required=True, help="target task name")
    s.add_argument("--method", choices=METHODS, default="best-of-top-k", help="transfer method")
    s.add_argument("--k", type=int, default=1, help="number of retrieved source prompts")
    s.add_argument("--metric", choices=sorted(_METRICS), help="similarity metric (default: config)")
    s.add_argument("--seed", type=int, help="target run seed (default: first config seed)")
    s.add_argument("--target-steps", type=int, help="override target tuning steps")
    s.add_argument("--mixture-checkpoint", choices=("final", "best"), default="final",
                   help="prompt handed over from mixture tuning")
    s.add_argument("--out", help="where to write the tuned prompt checkpoint")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("sweep", help="transfer every library prompt to every target task")
    s.add_argument("--library", required=True, help="library directory")
    s.add_argument("--out", required=True, help="output directory for results and similarity CSVs")
    s.add_argument("--targets", nargs="+", help="subset of target tasks")
    s.add_argument("--metric", choices=sorted(_METRICS), help="similarity metric (default: config)")
    s.add_argument("--target-steps", type=int, help="override target tuning steps")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("oracle", help="brute-force best source per target")
    s.add_argument("--results", help="transfer results CSV (source,target,mean,std,runs)")
    s.add_argument("--fixture", choices=("paper",), help="use the embedded published table instead")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("analyze", help="RER matrix, oracle, clustered heatmap and Pearson reports")
    s.add_argument("--results", help="transfer results CSV (source,target,mean,std,runs)")
    s.add_argument("--fixture", choices=("paper",), help="use the embedded published table instead")
    s.add_argument("--similarity", help="target,source,similarity CSV for correlation reports")
    s.add_argument("--embedding-similarity", help="square similarity heatmap CSV to cluster")
    s.add_argument("--out", help="output directory (default: current directory)")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"spot: usage error: {exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"spot: config error: {exc}\n")
        return EXIT_CONFIG
    except (SpotError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"spot: error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
