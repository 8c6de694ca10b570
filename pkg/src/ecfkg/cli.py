"""``ecfkg`` command line: ingest, synth, train, recommend, explain, evaluate, ablate."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .errors import EcfkgError
from .evaluation import (
    EvalReport,
    evaluate,
    fisher_randomization,
    format_table,
    random_baseline,
    run_ablation,
    write_report_tsv,
)
from .explain import best_explanation, write_explanations_text, write_explanations_tsv
from .graph import (
    ALL_RELATIONS,
    EntityType,
    RelationType,
    filter_relations,
    split_train_test,
    write_triplets,
)
from .ingest import (
    SyntheticConfig,
    VocabConfig,
    build_from_reviews,
    generate_synthetic,
    load_triplets,
    open_text,
    read_metadata,
    read_reviews,
)
from .model import Hyperparams, load_checkpoint, save_checkpoint, train
from .recommend import top_n, write_rankings

log = logging.getLogger("ecfkg")


class UsageError(Exception):
    pass


def relation_set(text: str) -> frozenset[RelationType]:
    if text == "all":
        return ALL_RELATIONS
    try:
        rels = frozenset(RelationType.from_wire(p.strip()) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not rels:
        raise argparse.ArgumentTypeError("empty relation list")
    return rels


def ratio(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError("split ratio must be in (0, 1)")
    return value


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("ECFKG_THREADS", "1")))
    except ValueError:
        return 1


def _add_hyperparams(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--dim", type=int, default=300, help="embedding dimension (default 300)")
    g.add_argument("--epochs", type=int, default=20, help="training epochs (default 20)")
    g.add_argument("--neg", type=int, default=5, help="negative samples per triplet (default 5)")
    g.add_argument("--lr", type=float, default=0.5, help="initial learning rate (default 0.5)")
    g.add_argument("--lr-final", type=float, default=0.0,
                   help="learning rate reached at the last batch, linear decay (default 0.0)")
    g.add_argument("--batch", type=int, default=64, help="triplets per batch (default 64)")
    g.add_argument("--clip", type=float, default=5.0,
                   help="global L2 clip on each batch gradient (default 5.0)")
    g.add_argument("--mode", choices=("deterministic", "fast"), default="deterministic",
                   help="deterministic: float64, single thread; fast: float32, --threads workers")
    g.add_argument("--threads", type=int, default=_default_threads(),
                   help="worker threads in fast mode (default $ECFKG_THREADS or 1)")
    g.add_argument("--backend", choices=("cython", "python"), default=None,
                   help="training kernel (default: compiled if available)")


def _add_split(p: argparse.ArgumentParser, default=None) -> None:
    p.add_argument("--split", type=ratio, default=default,
                   help="train fraction of each user's purchases; the seeded train part is used"
                   + ("" if default is None else f" (default {default})"))
    p.add_argument("--relations", type=relation_set, default=ALL_RELATIONS,
                   help="comma-separated relations to keep before splitting (default all)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecfkg", description="Knowledge-graph embeddings for explainable recommendation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", help="review + metadata JSON lines -> triplet TSV")
    p.add_argument("--reviews", required=True, type=Path,
                   help="reviews JSON lines (reviewerID, asin, reviewText); .gz accepted")
    p.add_argument("--meta", type=Path, help="metadata JSON lines (asin, brand, categories, related)")
    p.add_argument("--min-word-count", type=int, default=1, help="drop rarer words (default 1)")
    p.add_argument("--max-vocab", type=int, default=1_000_000, help="word vocabulary cap")
    p.add_argument("--keep-case", action="store_true", help="do not lowercase review text")
    p.add_argument("--out", required=True, type=Path, help="output triplet TSV")

    p = sub.add_parser("synth", help="planted-cluster synthetic graph -> triplet TSV")
    defaults = SyntheticConfig()
    for name in ("num_users", "num_items", "num_brands", "num_categories", "num_words",
                 "cluster_count", "purchases_per_user", "words_per_purchase"):
        p.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name),
                       help=f"(default {getattr(defaults, name)})")
    for name in ("within_cluster_affinity", "popularity_exponent", "brand_preference"):
        p.add_argument("--" + name.replace("_", "-"), type=float, default=getattr(defaults, name),
                       help=f"(default {getattr(defaults, name)})")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--out", required=True, type=Path, help="output triplet TSV")
    p.add_argument("--clusters-out", type=Path, help="optional TSV of entity cluster labels")

    p = sub.add_parser("train", help="triplet TSV -> checkpoint")
    p.add_argument("--triplets", required=True, type=Path, help="input triplet TSV")
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    p.add_argument("--loss-out", type=Path, help="optional TSV of per-epoch mean loss")
    _add_split(p)
    _add_hyperparams(p)

    p = sub.add_parser("recommend", help="checkpoint + users -> ranked TSV")
    p.add_argument("--model", required=True, type=Path, help="checkpoint")
    p.add_argument("--users", type=Path, help="file with one user key per line (default all users)")
    p.add_argument("--triplets", type=Path,
                   help="triplet TSV whose purchases are excluded from the rankings")
    p.add_argument("--k", type=int, default=10, help="list length (default 10)")
    p.add_argument("--seed", type=int, default=0, help="root seed for --split (default 0)")
    p.add_argument("--out", type=Path, help="output TSV (default stdout)")
    _add_split(p)

    p = sub.add_parser("explain", help="checkpoint + triplets + user/item pairs -> explanations")
    p.add_argument("--model", required=True, type=Path, help="checkpoint")
    p.add_argument("--triplets", required=True, type=Path, help="triplet TSV searched for paths")
    p.add_argument("--pairs", required=True, type=Path, help="TSV of user_key<TAB>item_key")
    p.add_argument("--z-max", type=int, default=2, help="maximum hops per side (default 2)")
    p.add_argument("--fixed-depth", action="store_true",
                   help="search exactly --z-max hops instead of stopping at the first meeting depth")
    p.add_argument("--top", type=int, default=0, help="paths per pair, 0 = all (default 0)")
    p.add_argument("--format", choices=("tsv", "text"), default="tsv", help="output format")
    p.add_argument("--seed", type=int, default=0, help="root seed for --split (default 0)")
    p.add_argument("--out", type=Path, help="output file (default stdout)")
    _add_split(p)

    p = sub.add_parser("evaluate", help="checkpoint + triplets -> top-k metrics on the test split")
    p.add_argument("--model", required=True, type=Path, help="checkpoint trained on the same split")
    p.add_argument("--triplets", required=True, type=Path, help="full triplet TSV")
    p.add_argument("--k", type=int, default=10, help="cutoff (default 10)")
    p.add_argument("--seed", type=int, default=0, help="root seed; must match training (default 0)")
    p.add_argument("--out", type=Path, help="optional report TSV")
    p.add_argument("--per-user-out", type=Path, help="optional per-user metrics TSV")
    _add_split(p, default=0.7)

    p = sub.add_parser("ablate", help="train and evaluate over relation subsets")
    p.add_argument("--triplets", required=True, type=Path, help="full triplet TSV")
    p.add_argument("--subset", action="append", type=relation_set, dest="subsets",
                   help="comma-separated relations (repeatable; default: purchase, "
                   "purchase plus each other present relation, all)")
    p.add_argument("--split", type=ratio, default=0.7, help="train fraction (default 0.7)")
    p.add_argument("--k", type=int, default=10, help="cutoff (default 10)")
    p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    p.add_argument("--iterations", type=int, default=100_000,
                   help="sign-flip iterations for the significance test (default 100000)")
    p.add_argument("--out", type=Path, help="optional report TSV")
    _add_hyperparams(p)
    return parser


def hyperparams(args) -> Hyperparams:
    return Hyperparams(dim=args.dim, epochs=args.epochs, batch_size=args.batch, negatives=args.neg,
                       lr_initial=args.lr, lr_final=args.lr_final, clip_norm=args.clip,
                       seed=args.seed, mode=args.mode, threads=args.threads)


def _check_inputs(*paths) -> None:
    for path in paths:
        if path is not None and not path.is_file():
            raise FileNotFoundError(f"input file not found: {path}")


def _check_outputs(*paths) -> None:
    for path in paths:
        if path is not None and not path.parent.resolve().is_dir():
            raise FileNotFoundError(f"output directory does not exist: {path.parent}")


@contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


def _graph(args):
    kg = load_triplets(args.triplets)
    if getattr(args, "relations", ALL_RELATIONS) != ALL_RELATIONS:
        kg = filter_relations(kg, args.relations)
    if getattr(args, "split", None):
        return kg, split_train_test(kg, args.split, args.seed)
    return kg, None


def cmd_ingest(args) -> None:
    _check_inputs(args.reviews, args.meta)
    _check_outputs(args.out)
    with open_text(args.reviews) as fh:
        reviews = read_reviews(fh)
    meta = []
    if args.meta:
        with open_text(args.meta) as fh:
            meta = read_metadata(fh)
    cfg = VocabConfig(args.min_word_count, args.max_vocab, not args.keep_case)
    kg = build_from_reviews(reviews, meta, cfg)
    with _output(args.out) as out:
        write_triplets(kg, out)
    log.info("wrote %d triplets (%s)", len(kg), kg)


def cmd_synth(args) -> None:
    _check_outputs(args.out, args.clusters_out)
    fields = {k: getattr(args, k) for k in SyntheticConfig.__dataclass_fields__ if hasattr(args, k)}
    kg, clusters = generate_synthetic(SyntheticConfig(**fields))
    with _output(args.out) as out:
        write_triplets(kg, out)
    if args.clusters_out:
        with _output(args.clusters_out) as out:
            for etype, labels in ((EntityType.USER, clusters.users), (EntityType.ITEM, clusters.items),
                                  (EntityType.BRAND, clusters.brands),
                                  (EntityType.CATEGORY, clusters.categories)):
                for i, c in enumerate(labels):
                    out.write(f"{etype.wire}:{kg.vocab(etype)[i]}\t{c}\n")
    log.info("wrote %d triplets (%s)", len(kg), kg)


def cmd_train(args) -> None:
    _check_inputs(args.triplets)
    _check_outputs(args.out, args.loss_out)
    hp = hyperparams(args)
    hp.validate()
    kg, split = _graph(args)
    graph = split.train_graph if split else kg
    model, report = train(graph, hp, backend=args.backend)
    save_checkpoint(model, args.out)
    if args.loss_out:
        with _output(args.loss_out) as out:
            out.write("epoch\tloss\n")
            for i, loss in enumerate(report.epoch_losses, start=1):
                out.write(f"{i}\t{loss!r}\n")
    log.info("trained on %d triplets with %s kernel in %.1fs; final loss %.6f",
             len(graph), report.backend, report.wall_time, report.epoch_losses[-1])


def cmd_recommend(args) -> None:
    _check_inputs(args.model, args.users, args.triplets)
    _check_outputs(args.out)
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    model = load_checkpoint(args.model)
    exclude_graph = None
    if args.triplets:
        kg, split = _graph(args)
        exclude_graph = split.train_graph if split else kg
    if args.users:
        with open_text(args.users) as fh:
            keys = [line.strip() for line in fh if line.strip()]
    else:
        keys = model.keys[EntityType.USER]
    rankings = []
    for key in keys:
        user = model.entity(EntityType.USER, key)
        seen = []
        if exclude_graph is not None and exclude_graph.has_entity(user):
            seen = exclude_graph.purchases(exclude_graph.entity(EntityType.USER, key))
            seen = [model.entity(EntityType.ITEM, exclude_graph.key_of(i)) for i in seen]
        rankings.append(top_n(model, user, args.k, exclude=seen))
    with _output(args.out) as out:
        write_rankings(model, rankings, out)


def cmd_explain(args) -> None:
    _check_inputs(args.model, args.triplets, args.pairs)
    _check_outputs(args.out)
    model = load_checkpoint(args.model)
    kg, split = _graph(args)
    graph = split.train_graph if split else kg
    if not model.matches_vocab(graph):
        raise EcfkgError("checkpoint vocabulary does not match the triplet file")
    pairs = []
    with open_text(args.pairs) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) < 2:
                raise EcfkgError(f"{args.pairs}:{line_no}: expected user_key<TAB>item_key")
            pairs.append((graph.entity(EntityType.USER, parts[0]),
                          graph.entity(EntityType.ITEM, parts[1])))
    with _output(args.out) as out:
        for user, item in pairs:
            paths = best_explanation(graph, model, user, item, args.z_max,
                                     incremental=not args.fixed_depth)
            if args.top > 0:
                paths = paths[:args.top]
            if args.format == "tsv":
                write_explanations_tsv(graph, paths, out)
            else:
                write_explanations_text(graph, user, item, paths, out)


def cmd_evaluate(args) -> None:
    _check_inputs(args.model, args.triplets)
    _check_outputs(args.out, args.per_user_out)
    model = load_checkpoint(args.model)
    _, split = _graph(args)
    config = {"relations": sorted(r.wire for r in args.relations), "dim": model.dim, "seed": args.seed}
    report = evaluate(model, split, args.k, config)
    rows = [("model", report)]
    baseline = random_baseline(split, args.k)
    if baseline is not None:
        # expectation over the same test users; per-user rows are not kept
        rows.append(("random (expected)", EvalReport(dict.fromkeys(report.per_user), baseline, args.k)))
    print(format_table(rows))
    if report.empty:
        print("no test users with held-out purchases")
    if args.out:
        with _output(args.out) as out:
            write_report_tsv([("model", report)], out)
    if args.per_user_out:
        with _output(args.per_user_out) as out:
            out.write("user\tndcg\trecall\thit_ratio\tprecision\n")
            for user in sorted(report.per_user):
                m = report.per_user[user]
                out.write(f"{split.train_graph.key_of(user)}\t{m.ndcg!r}\t{m.recall!r}\t"
                          f"{m.hit_ratio!r}\t{m.precision!r}\n")


def cmd_ablate(args) -> None:
    _check_inputs(args.triplets)
    _check_outputs(args.out)
    hp = hyperparams(args)
    hp.validate()
    kg = load_triplets(args.triplets)
    subsets = args.subsets
    if not subsets:
        present = [r for r in RelationType if r is not RelationType.PURCHASE and kg.relation_count(r)]
        subsets = [frozenset({RelationType.PURCHASE})]
        subsets += [frozenset({RelationType.PURCHASE, r}) for r in present]
        subsets.append(ALL_RELATIONS)
    reports = run_ablation(kg, subsets, hp, args.k, args.split, backend=args.backend)
    names = ["+".join(r.wire for r in sorted(s)) if s != ALL_RELATIONS else "all" for s in subsets]
    rows = list(zip(names, reports))
    print(format_table(rows))
    ref_name, ref = rows[-1]
    for name, rep in rows[:-1]:
        if rep.empty or ref.empty:
            continue
        sig = fisher_randomization(ref.values("ndcg"), rep.values("ndcg"), args.iterations, args.seed)
        print(f"{ref_name} vs {name}: mean NDCG diff {sig.observed_difference:+.5f}, p = {sig.p_value:.4g}")
    if args.out:
        with _output(args.out) as out:
            write_report_tsv(rows, out)


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "train": cmd_train, "recommend": cmd_recommend,
    "explain": cmd_explain, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except BrokenPipeError:
        # downstream closed early (e.g. piped into head)
        sys.stderr.close()
        return 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ecfkg: error: {exc}", file=sys.stderr)
        return 2
    except (EcfkgError, OSError, ValueError) as exc:
        print(f"ecfkg: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
