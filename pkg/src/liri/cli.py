"""Command-line driver.

Exit codes: 0 success, 1 usage error, 2 data error (bad or inconsistent
input files, stale index, corrupt file).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from liri._io import atomic_write_text
from liri.base import DataError, LiriError, MalformedLineError, RankedResult
from liri.data import SynthConfig, _read_tsv, generate_synthetic, load_dataset, save_dataset
from liri.dense import build_token_index, dense_score_all, dense_search, load_index, save_index
from liri.encoder import EncoderConfig, init_params, load_checkpoint, save_checkpoint
from liri.evalbench import (
    DEFAULT_WEIGHTS,
    TSV_HEADER,
    Bm25System,
    DenseSystem,
    EnsembleWeights,
    benchmark_latency,
    bm25_factory,
    dense_factory,
    ensemble_factory,
    ensemble_scores,
    match_at_k,
    run_protocol,
    tsv_row,
)
from liri.learn import STRATEGIES, EncodedCorpus, Sampler, TrainConfig, train, write_triples
from liri.sparse import MAGIC as BM25_MAGIC
from liri.sparse import bm25_score_all, bm25_search, build_bm25, load_bm25, save_bm25

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _clusters(text: str):
    if text == "auto":
        return "auto"
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("--ivf-clusters must be >= 1")
    return value


def _weights(text: str) -> EnsembleWeights:
    try:
        return EnsembleWeights.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _encoder_flags(p: argparse.ArgumentParser) -> None:
    d = EncoderConfig()
    p.add_argument("--similarity", choices=["neg_l2", "dot"], default=d.similarity)
    p.add_argument("--dim", type=int, default=d.dim)
    p.add_argument("--buckets", type=int, default=d.buckets)
    p.add_argument("--query-maxlen", type=int, default=d.query_maxlen)
    p.add_argument("--doc-maxlen", type=int, default=d.doc_maxlen)


def _train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--m", type=int, default=d.m)
    p.add_argument("--r-rand", type=int, default=d.r_rand)
    p.add_argument("--rounds", type=int, default=d.max_rounds)
    p.add_argument("--epochs", type=int, default=d.epochs_per_round)
    p.add_argument("--one-pass-epochs", type=int, default=d.one_pass_epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--target", type=float, default=d.target_train_match1)
    p.add_argument("--minibatch", type=int, default=d.minibatch_size)


def _search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k-tok", type=int, default=8)
    p.add_argument("--nprobe", type=int, default=4)
    p.add_argument("--ivf-clusters", type=_clusters, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="liri", description="Late-interaction FAQ retrieval with self-guided negative sampling.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic FAQ dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-passages", type=int, default=SynthConfig.n_passages)
    p.add_argument("--queries-per-passage", type=int, default=SynthConfig.queries_per_passage)
    p.add_argument("--test-queries-per-passage", type=int, default=SynthConfig.test_queries_per_passage)
    p.add_argument("--noise", type=float, default=SynthConfig.paraphrase_noise)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("index", help="build and persist sparse and/or dense indexes")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--kind", choices=["sparse", "dense", "both"], default="both")
    p.add_argument("--checkpoint", type=Path, help="encoder checkpoint; a fresh one is initialized and saved if omitted")
    p.add_argument("--seed", type=int, default=0)
    _encoder_flags(p)
    _search_flags(p)

    p = sub.add_parser("search", help="query a persisted index")
    p.add_argument("--index", required=True, type=Path)
    p.add_argument("--checkpoint", type=Path, help="required for dense indexes")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--query")
    group.add_argument("--queries", type=Path, help="tab-separated query_id, text")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--dump-scores", type=Path, help="write full score maps (for ensemble) instead of rankings")
    p.add_argument("--mode", choices=["late_interaction", "single_vector"], default="late_interaction")
    _search_flags(p)

    p = sub.add_parser("train", help="train an encoder")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--strategy", choices=STRATEGIES, default="iterative")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--triples-out", type=Path, help="also write the first curated batch")
    _encoder_flags(p)
    _train_flags(p)
    _search_flags(p)

    p = sub.add_parser("evaluate", help="run the k-examples-per-doc protocol")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--system", choices=["bm25", "dense", "ensemble"], default="dense")
    p.add_argument("--strategy", choices=STRATEGIES, default="iterative")
    p.add_argument("--checkpoint", type=Path, help="evaluate this fixed checkpoint instead of training per seed")
    p.add_argument("--k-ex", type=int, default=1, help="training examples per passage (0 = zero-shot)")
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="first seed; seeds are seed .. seed+n_seeds-1")
    p.add_argument("--weights", type=_weights, default=DEFAULT_WEIGHTS)
    p.add_argument("--latency-reps", type=int, default=0)
    _encoder_flags(p)
    _train_flags(p)
    _search_flags(p)

    p = sub.add_parser("ensemble", help="combine two score dumps")
    p.add_argument("--a", required=True, type=Path)
    p.add_argument("--b", required=True, type=Path)
    p.add_argument("--weights", type=_weights, default=DEFAULT_WEIGHTS)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--data", type=Path, help="dataset directory; reports Match@1 on its test qrels")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("benchmark", help="latency and footprint report")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    _encoder_flags(p)
    _search_flags(p)
    return parser


def _encoder_config(args) -> EncoderConfig:
    return EncoderConfig(args.dim, args.buckets, args.query_maxlen, args.doc_maxlen, args.similarity, 0)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        epochs_per_round=args.epochs,
        max_rounds=args.rounds,
        m=args.m,
        r_rand=args.r_rand,
        target_train_match1=args.target,
        minibatch_size=args.minibatch,
        seed=args.seed,
        one_pass_epochs=args.one_pass_epochs,
        k_tok=args.k_tok,
        nprobe=args.nprobe,
        ivf_clusters=args.ivf_clusters,
    )


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(out, text)


def _format_ranking(qid: str | None, result: RankedResult) -> str:
    prefix = f"{qid}\t" if qid is not None else ""
    return "".join(f"{prefix}{rank}\t{pid}\t{score:.6f}\n" for rank, (pid, score) in enumerate(result.items, start=1))


def _read_queries(path: Path) -> list[tuple[str, str]]:
    return [(qid, text) for _, qid, text in _read_tsv(path)]


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_passages=args.n_passages,
        queries_per_passage=args.queries_per_passage,
        test_queries_per_passage=args.test_queries_per_passage,
        paraphrase_noise=args.noise,
        seed=args.seed,
    )
    dataset = generate_synthetic(cfg)
    save_dataset(dataset, args.out)
    meta = dataset.metadata()
    print(f"wrote {meta['docs']} passages, {meta['train_queries']} train and {meta['test_queries']} test queries to {args.out}")
    return EXIT_OK


def cmd_index(args) -> int:
    dataset = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.kind in ("sparse", "both"):
        save_bm25(build_bm25(dataset.passages), args.out / "bm25.idx")
        print(f"wrote {args.out / 'bm25.idx'}")
    if args.kind in ("dense", "both"):
        if args.checkpoint is not None:
            params = load_checkpoint(args.checkpoint)
        else:
            params = init_params(_encoder_config(args), args.seed)
            save_checkpoint(params, args.out / "model.ckpt")
            print(f"wrote {args.out / 'model.ckpt'}")
        index = build_token_index(params, dataset.passages, args.ivf_clusters, args.seed)
        save_index(index, args.out / "tokens.idx")
        print(f"wrote {args.out / 'tokens.idx'} (checkpoint version {params.version})")
    return EXIT_OK


def _load_system(index_path: Path, checkpoint: Path | None, args):
    head = index_path.read_bytes()[: len(BM25_MAGIC)]
    if head == BM25_MAGIC:
        return "sparse", load_bm25(index_path), None
    index = load_index(index_path)
    if checkpoint is None:
        raise UsageError("searching a dense index needs --checkpoint")
    return "dense", index, load_checkpoint(checkpoint)


def cmd_search(args) -> int:
    kind, index, params = _load_system(args.index, args.checkpoint, args)
    queries = [(None, args.query)] if args.query is not None else _read_queries(args.queries)
    out = []
    for qid, text in queries:
        if args.dump_scores is not None:
            scores = bm25_score_all(index, text) if kind == "sparse" else dense_score_all(index, params, text)
            out.append(json.dumps({"query_id": qid if qid is not None else text, "scores": scores}) + "\n")
        elif kind == "sparse":
            out.append(_format_ranking(qid, bm25_search(index, text, args.k)))
        else:
            out.append(_format_ranking(qid, dense_search(index, params, text, args.k, args.k_tok, args.nprobe, args.mode)))
    _emit("".join(out), args.dump_scores)
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    enc = _encoder_config(args)
    cfg = _train_config(args)
    params, history = train(args.strategy, dataset, enc, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, args.out / "model.ckpt")
    atomic_write_text(args.out / "history.jsonl", history.to_jsonl())
    if args.triples_out is not None:
        sampler = Sampler(dataset, EncodedCorpus.from_dataset(dataset, enc), cfg, np.random.default_rng(cfg.seed))
        atomic_write_text(args.triples_out, write_triples(sampler.curate(params).triples))
    print(
        f"{args.strategy}: status {history.status}, {len(history.records)} rounds, "
        f"{history.triple_updates} triple updates, train Match@1 {history.final_train_match1:.3f}, "
        f"{history.total_seconds:.2f}s; wrote {args.out / 'model.ckpt'} (version {params.version})"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dataset = load_dataset(args.data)
    enc = _encoder_config(args)
    cfg = _train_config(args)
    if args.checkpoint is not None:
        params = load_checkpoint(args.checkpoint)
        index = build_token_index(params, dataset.passages, args.ivf_clusters, args.seed)
        fixed = DenseSystem(index, params, args.k_tok, args.nprobe)
        dense = lambda d, s: fixed  # noqa: E731
        k_ex = 0
    else:
        dense = dense_factory(enc, cfg, args.strategy, args.k_tok, args.nprobe)
        k_ex = args.k_ex
    factories = {
        "bm25": bm25_factory(),
        "dense": dense,
        "ensemble": ensemble_factory(bm25_factory(), dense, args.weights),
    }
    if args.system == "bm25":
        k_ex = 0
    seeds = list(range(args.seed, args.seed + args.n_seeds))
    report = run_protocol(dataset, k_ex, factories[args.system], seeds=seeds, system_name=args.system, latency_reps=args.latency_reps)
    atomic_write_text(args.out, report.to_text())
    print(TSV_HEADER)
    print(tsv_row(args.system, {k_ex: report}))
    return EXIT_OK


def _read_dump(path: Path) -> dict[str, dict[str, float]]:
    dump = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            dump[str(rec["query_id"])] = {str(k): float(v) for k, v in rec["scores"].items()}
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise MalformedLineError(f"{path.name}:{lineno}: {exc}") from None
    return dump


def cmd_ensemble(args) -> int:
    a, b = _read_dump(args.a), _read_dump(args.b)
    if a.keys() != b.keys():
        raise DataError(f"score dumps cover different queries; symmetric difference: {sorted(a.keys() ^ b.keys())}")
    rankings = {qid: ensemble_scores(a[qid], b[qid], args.weights) for qid in a}
    lines = [_format_ranking(qid, RankedResult(r.items[: args.k])) for qid, r in rankings.items()]
    _emit("".join(lines), args.out)
    if args.data is not None:
        dataset = load_dataset(args.data)
        qrels = {qid: gold for qid, gold in dataset.qrels("test").items() if qid in rankings}
        if qrels:
            m = {
                "a": match_at_k({q: RankedResult.from_scores(a[q].items()) for q in qrels}, qrels, 1),
                "b": match_at_k({q: RankedResult.from_scores(b[q].items()) for q in qrels}, qrels, 1),
                f"ensemble {args.weights}": match_at_k(rankings, qrels, 1),
            }
            for name, value in m.items():
                print(f"Match@1 {name}: {value:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    dataset = load_dataset(args.data)
    params = load_checkpoint(args.checkpoint) if args.checkpoint else init_params(_encoder_config(args), args.seed)
    queries = [q.text for q in dataset.test_queries or dataset.train_queries]
    systems = [
        Bm25System(build_bm25(dataset.passages)),
        DenseSystem(build_token_index(params, dataset.passages), params, name="dense-exact"),
    ]
    if args.ivf_clusters is not None:
        ivf = build_token_index(params, dataset.passages, args.ivf_clusters, args.seed)
        systems.append(DenseSystem(ivf, params, args.k_tok, args.nprobe, name="dense-ivf"))
    systems.append(DenseSystem(systems[1].index, params, mode="single_vector", name="dense-single"))
    lines = ["system\tmean_ms\tp50_ms\tp95_ms\tn\tindex_bytes\n"]
    for system in systems:
        r = benchmark_latency(system, queries, args.warmup, args.reps)
        lat = r.latency
        lines.append(f"{r.system}\t{lat.mean_ms:.4f}\t{lat.p50_ms:.4f}\t{lat.p95_ms:.4f}\t{lat.n}\t{r.index_bytes}\n")
    text = "".join(lines)
    sys.stdout.write(text)
    if args.out is not None:
        atomic_write_text(args.out, text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "index": cmd_index,
    "search": cmd_search,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ensemble": cmd_ensemble,
    "benchmark": cmd_benchmark,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (LiriError, OSError) as exc:
        print(f"liri: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # Invalid parameter values (e.g. --dim 1) are usage errors.
        print(f"liri: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
