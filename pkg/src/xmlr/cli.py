"""Command line: synth | encode | retrieve | train | eval | bench | convse-demo.

Exit codes: 0 success, 1 I/O or data errors, 2 bad arguments.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import evalkit, featstore, scorer, trainkit
from .encstore import read_encoded_store, write_encoded_store
from .momentgen import GENERATORS
from .numkit import Rng

log = logging.getLogger("xmlr")

STORE_NAME = "features.xmlf"
QUERIES_NAME = "queries.jsonl"
TRUTH_NAME = "truth.jsonl"


class CliError(Exception):
    """Reported on stderr with exit code 1."""


def _dims(text: str) -> tuple[int, int, int]:
    parts = [int(x) for x in text.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError("expected D or D_V,D_S,D_Q with positive integers")
    return tuple(parts)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _threads(args) -> int:
    env = os.environ.get("XMLR_THREADS")
    if env:
        return max(1, int(env))
    return args.threads if args.threads else (os.cpu_count() or 1)


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    if args.max_moment > args.clips:
        args.parser.error(f"--max-moment ({args.max_moment}) exceeds --clips ({args.clips})")
    if args.min_moment > args.max_moment:
        args.parser.error("--min-moment exceeds --max-moment")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, queries, _ = featstore.synth_corpus(
        Rng(args.seed), args.videos, args.clips, args.dims, args.queries, args.max_moment, args.signal,
        query_len=args.query_len, min_moment_len=args.min_moment, clip_duration=args.clip_duration)
    if args.tef:
        manifest = featstore.append_tef(manifest)
    featstore.write_store(manifest, out / STORE_NAME)
    featstore.write_queries_jsonl(out / QUERIES_NAME, queries)
    with open(out / TRUTH_NAME, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({"query_id": q.query_id, "video_id": q.gt_video_id, "ts": list(q.gt_span_s),
                                 "clip_span": list(q.gt_clip_span)}) + "\n")
    print(f"seed={args.seed} videos={len(manifest)} clips={args.clips} "
          f"dims=({manifest.d_v},{manifest.d_s},{manifest.d_q}) queries={len(queries)} tef={manifest.tef_enabled}")
    return 0


# ---------------------------------------------------------------- encode

def _load_checkpoint(path) -> enc.ModelParams:
    if not Path(path).exists():
        raise CliError(f"checkpoint not found: {path}")
    return enc.load_checkpoint(path)


def _check_dims(params: enc.ModelParams, d_v: int, d_s: int, d_q=None) -> None:
    pv, ps, pq = params.raw_dims
    if (pv, ps) != (d_v, d_s) or (d_q is not None and pq != d_q):
        raise CliError(f"feature dims ({d_v}, {d_s}, {d_q}) do not match checkpoint ({pv}, {ps}, {pq})")


def cmd_encode(args) -> int:
    params = _load_checkpoint(args.checkpoint)
    manifest = featstore.read_store(args.store)
    _check_dims(params, manifest.d_v, manifest.d_s)
    t0 = time.perf_counter()
    encoded = enc.encode_corpus(manifest.videos, params)
    feat_time = time.perf_counter() - t0
    nbytes = write_encoded_store(args.out, encoded)
    print(f"feat_time_s={feat_time:.4f} feat_size_bytes={nbytes} videos={len(encoded)} d={params.d}")
    return 0


# ---------------------------------------------------------------- retrieve

def _retrieval_config(args) -> scorer.RetrievalConfig:
    try:
        return scorer.RetrievalConfig(alpha=args.alpha, top_videos=args.top_videos, L_min=args.lmin,
                                      L_max=args.lmax, top_k_moments=args.topk)
    except ValueError as exc:
        args.parser.error(str(exc))


def _svmr_predictions(corpus: scorer.EncodedCorpus, eq, q, kernels, cfg, generator):
    if q.gt_video_id is None:
        return []
    i = corpus.ids.index(q.gt_video_id)
    ev = corpus.video(i)
    spans = scorer.video_moments(scorer.query_clip_scores(ev, eq), kernels, cfg, generator)
    return [scorer.MomentPrediction(ev.video_id, st, ed, s) for st, ed, s in spans]


def cmd_retrieve(args) -> int:
    cfg = _retrieval_config(args)
    params = _load_checkpoint(args.checkpoint)
    videos = read_encoded_store(args.encoded)
    if videos and videos[0].H_v0.shape[1] != params.d:
        raise CliError(f"encoded store d={videos[0].H_v0.shape[1]} != checkpoint d={params.d}")
    queries = featstore.read_queries_jsonl(args.queries)
    if queries and queries[0].tokens.shape[1] != params.raw_dims[2]:
        raise CliError(f"query dim {queries[0].tokens.shape[1]} != checkpoint {params.raw_dims[2]}")
    corpus = scorer.EncodedCorpus(videos)
    kernels = (params["k_st"], params["k_ed"])
    durations = {v.video_id: v.clip_duration for v in videos}
    eqs = [enc.encode_query(q.tokens, params) for q in queries]

    if args.mode == "svmr":
        results = [_svmr_predictions(corpus, eq, q, kernels, cfg, args.generator) for eq, q in zip(eqs, queries)]
    elif args.exhaustive:
        results = [scorer.retrieve_exhaustive(videos, eq, kernels, cfg, args.generator) for eq in eqs]
    else:
        threads = _threads(args)
        chunk = max(1, -(-len(eqs) // threads))
        parts = [eqs[s:s + chunk] for s in range(0, len(eqs), chunk)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = pool.map(lambda part: scorer.retrieve_batch(corpus, part, kernels, cfg, args.generator), parts)
        results = [r for part in done for r in part]
    records = [scorer.prediction_record(q.query_id, preds, durations) for q, preds in zip(queries, results)]
    scorer.write_predictions(args.out, records)
    print(f"queries={len(queries)} videos={len(videos)} generator={args.generator} mode={args.mode} out={args.out}")
    return 0


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    manifest = featstore.read_store(args.store)
    queries = featstore.read_queries_jsonl(args.queries, {v.video_id: v for v in manifest.videos})
    if not queries:
        raise CliError("no training queries")
    d_q = queries[0].tokens.shape[1]
    try:
        cfg = trainkit.TrainConfig(margin_delta=args.delta, lambda_svmr=args.lambda_svmr, lr=args.lr,
                                   epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
                                   max_steps=args.steps, svmr_loss=args.svmr_loss)
    except ValueError as exc:
        args.parser.error(str(exc))
    if args.init:
        params = _load_checkpoint(args.init)
        _check_dims(params, manifest.d_v, manifest.d_s, d_q)
    else:
        max_len = max([v.n_clips for v in manifest.videos] + [q.tokens.shape[0] for q in queries] + [args.max_len])
        params = enc.ModelParams.init(Rng(args.seed), manifest.d_v, manifest.d_s, d_q, d=args.d,
                                      kernel_size=args.kernel, max_len=max_len)
    data = trainkit.TrainData.from_records(manifest, queries)
    t0 = time.perf_counter()
    params, tlog = trainkit.train(data, params, cfg)
    enc.save_checkpoint(params, args.out)
    if args.log:
        tlog.write_csv(args.log)
    last = tlog.rows[-1] if tlog.rows else (0, float("nan"), float("nan"), float("nan"))
    print(f"seed={args.seed} steps={len(tlog.rows)} L_vr={last[1]:.6f} L_svmr={last[2]:.6f} "
          f"total={last[3]:.6f} time_s={time.perf_counter() - t0:.2f} out={args.out}")
    return 0


# ---------------------------------------------------------------- eval

def read_truth(path) -> dict[int, tuple]:
    gts = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                ts = rec.get("ts")
                gts[int(rec["query_id"])] = None if ts is None else (rec.get("video_id"), float(ts[0]), float(ts[1]))
    return gts


def read_predictions_seconds(path) -> dict[int, list[tuple]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[int(rec["query_id"])] = [tuple(p) for p in rec["predictions_s"]]
    return out


def cmd_eval(args) -> int:
    preds = read_predictions_seconds(args.predictions)
    gts = read_truth(args.truth)
    res = evalkit.recall_at_k(preds, gts, args.ks, args.ious, args.task)
    print(res.to_json())
    return 0


# ---------------------------------------------------------------- bench

def cmd_bench(args) -> int:
    report = evalkit.bench_retrieval(args.sizes, args.queries, args.engines, d=args.d, clips=args.clips,
                                     dims=args.dims, repeats=args.repeats, seed=args.seed,
                                     log=lambda m: print(m, file=sys.stderr))
    if args.out:
        report.write_csv(args.out)
    for engine in args.engines:
        rows = report.engine_rows(engine)
        if len(rows) >= 3:
            print(f"{engine} retrieval R^2={report.r_squared(engine):.4f}", file=sys.stderr)
    if set(args.engines) == set(evalkit.ENGINES):
        for size in args.sizes:
            print(f"size={size} speedup={report.speedup(size):.1f}x", file=sys.stderr)
    if not args.out:
        _print_csv(report)
    return 0


def _print_csv(report) -> None:
    w = csv.writer(sys.stdout)
    w.writerow(["engine", "corpus_size", "n_queries", "feat_time_s", "feat_size_bytes", "retrieval_time_s"])
    for r in report.rows:
        w.writerow([r.engine, r.corpus_size, report.n_queries, f"{r.feat_time_s:.6f}", r.feat_size_bytes,
                    f"{r.retrieval_time_s:.6f}"])


# ---------------------------------------------------------------- convse demo

def cmd_convse_demo(args) -> int:
    cfg = trainkit.TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed)
    demo = trainkit.train_convse_demo(Rng(args.seed), args.signals, args.length, args.noise, cfg,
                                      kernel_size=args.kernel)
    ious = trainkit.demo_top1_ious(demo)
    np.set_printoptions(precision=3, suppress=True)
    print(f"seed={args.seed} kernel={args.kernel} signals={args.signals} l={args.length} noise={args.noise}")
    print(f"k_st = {demo.k_st}")
    print(f"k_ed = {demo.k_ed}")
    print(f"corr(k_st, rising template) = {trainkit.template_correlation(demo.k_st, trainkit.edge_template(args.kernel)):.4f}")
    print(f"corr(k_ed, falling template) = "
          f"{trainkit.template_correlation(demo.k_ed, trainkit.edge_template(args.kernel, False)):.4f}")
    print(f"final loss = {demo.final_loss:.4f}  mean top-1 IoU = {np.mean(ious):.4f}")
    return 0


# ---------------------------------------------------------------- parser

def _add_retrieval_flags(p) -> None:
    p.add_argument("--alpha", type=float, default=20.0)
    p.add_argument("--top-videos", type=int, default=100)
    p.add_argument("--lmin", type=int, default=2)
    p.add_argument("--lmax", type=int, default=16)
    p.add_argument("--topk", type=int, default=100)
    p.add_argument("--generator", choices=GENERATORS, default="convse")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmlr", description="Late-fusion video corpus moment retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-moment corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=200)
    p.add_argument("--clips", type=int, default=20)
    p.add_argument("--dims", type=_dims, default=(64, 64, 64), help="D or D_V,D_S,D_Q")
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--query-len", type=int, default=15)
    p.add_argument("--max-moment", type=int, default=14)
    p.add_argument("--min-moment", type=int, default=2)
    p.add_argument("--signal", type=float, default=5.0)
    p.add_argument("--clip-duration", type=float, default=featstore.DEFAULT_CLIP_DURATION)
    p.add_argument("--tef", action="store_true", help="append temporal endpoint features")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", help="pre-encode every context in a feature store")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("retrieve", help="rank moments for queries")
    p.add_argument("--encoded", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("vcmr", "svmr"), default="vcmr")
    p.add_argument("--exhaustive", action="store_true", help="reference mode: score every video exhaustively")
    p.add_argument("--threads", type=int, default=0, help="0 = all cores; XMLR_THREADS overrides")
    _add_retrieval_flags(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", help="train on a feature store and its queries")
    p.add_argument("--store", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh initialisation")
    p.add_argument("--log", help="CSV training log")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--steps", type=int, default=None, help="stop after this many updates")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--lambda-svmr", type=float, default=0.01)
    p.add_argument("--svmr-loss", choices=("ce", "bce"), default="ce")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="R@K of a prediction file against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--task", choices=evalkit.TASKS, default="vcmr")
    p.add_argument("--ks", type=_int_list, default=list(evalkit.DEFAULT_KS))
    p.add_argument("--ious", type=_float_list, default=list(evalkit.DEFAULT_IOUS))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="late vs early fusion retrieval cost")
    p.add_argument("--sizes", type=_int_list, default=[1000, 5000, 10000])
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--engines", type=lambda s: s.split(","), default=list(evalkit.ENGINES))
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--clips", type=int, default=20)
    p.add_argument("--dims", type=_dims, default=(64, 64, 64))
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("convse-demo", help="learn edge filters on synthetic box curves")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--signals", type=int, default=500)
    p.add_argument("--length", type=int, default=30)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--epochs", type=int, default=trainkit.DEMO_CONFIG.epochs)
    p.add_argument("--lr", type=float, default=trainkit.DEMO_CONFIG.lr)
    p.set_defaults(func=cmd_convse_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.parser = parser
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, OSError, featstore.StoreError, featstore.IngestError, enc.CheckpointError) as exc:
        print(f"xmlr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
