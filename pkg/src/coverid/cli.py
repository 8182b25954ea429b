"""``coverid`` command line: synth, extract, train, embed, evaluate, query, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

LOSS_FLAGS = {"cls": "cls_only", "tri": "tri_only", "naive": "joint_naive", "bnneck": "joint_bnneck"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _limit_threads() -> None:
    cap = os.environ.get("COVERID_THREADS")
    if cap:
        try:
            from threadpoolctl import threadpool_limits

            threadpool_limits(int(cap))
        except ImportError:
            pass


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synth import build_dataset

    rows = build_dataset(args.cliques, args.versions, args.seed, args.out, factor=args.factor, wav=args.wav, log_compress=args.log)
    print(f"wrote {len(rows)} recordings to {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from .audio import extract_features, save_cqt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for wav in args.inputs:
        cqt = extract_features(wav, factor=args.factor, log_compress=args.log)
        dest = out / (Path(wav).stem + ".cqt")
        save_cqt(dest, cqt)
        print(f"{wav} -> {dest} ({cqt.n_frames} frames)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import ModelConfig, build_model
    from .training import LabeledDataset, TrainConfig, train

    ds = LabeledDataset.from_manifest(args.manifest)
    loss_mode = LOSS_FLAGS[args.loss]
    mcfg = ModelConfig.preset(
        args.preset,
        ds.num_classes,
        gem_split=args.gem_split,
        embed_dim=args.embed_dim,
        bnneck=loss_mode != "joint_naive",
    )
    tcfg = TrainConfig.for_preset(args.preset, epochs=args.epochs, seed=args.seed, loss_mode=loss_mode)
    if args.crop_len:
        tcfg.crop_len = args.crop_len
    model = build_model(mcfg, seed=args.seed)

    def report(row):
        print(
            f"epoch {row['epoch']:3d}  ce {row['ce_loss']:.4f}  tri {row['triplet_loss']:.4f}  "
            f"total {row['total_loss']:.4f}  val_map {row['val_map']:.4f}  p {row['gem_p']:.3f}",
            flush=True,
        )

    result = train(model, ds, tcfg, out_dir=args.out, validate=not args.no_val, on_epoch=report)
    print(f"checkpoints in {args.out}/final and {args.out}/best (epoch {result.best.epoch})")
    return EXIT_OK


def cmd_embed(args) -> int:
    from .retrieval import embed_all
    from .training import LabeledDataset, load_checkpoint, resolve_checkpoint_dir

    model = load_checkpoint(resolve_checkpoint_dir(args.ckpt)).build_model()
    ds = LabeledDataset.from_manifest(args.manifest)
    use_proj = None if not args.no_projection else False
    store = embed_all(model, ds.items(args.split), use_projection=use_proj)
    store.save(args.out)
    print(f"wrote {len(store)} embeddings of dim {store.dim} to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .retrieval import EmbeddingStore, evaluate, permutation_baseline
    from .training import LabeledDataset

    queries = EmbeddingStore.load(args.emb)
    refs = EmbeddingStore.load(args.refs) if args.refs else queries
    labels = LabeledDataset.from_manifest(args.manifest).labels()
    report = evaluate(queries, refs, labels, exclude_self=args.exclude_self)
    doc = report.to_dict()
    if args.baseline:
        doc["baseline_map"] = permutation_baseline(queries, refs, labels, args.exclude_self, args.baseline, args.seed)
        doc["baseline_permutations"] = args.baseline
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if args.json:
        print(json.dumps(doc, indent=2))
    else:
        print(report.table())
        if args.baseline:
            print(f"label-permutation baseline mAP ({args.baseline} shuffles): {doc['baseline_map']:.4f}")
    return EXIT_OK


def cmd_query(args) -> int:
    from .audio import extract_features
    from .retrieval import EmbeddingStore, extract_embedding
    from .synth import shift_cqt_bins
    from .training import load_checkpoint, resolve_checkpoint_dir

    store = EmbeddingStore.load(args.emb)
    model = load_checkpoint(resolve_checkpoint_dir(args.ckpt)).build_model()
    cqt = extract_features(args.wav, factor=args.factor, log_compress=args.log)
    shifts = range(-args.transpose_search, args.transpose_search + 1)
    refs = store.vectors.astype(np.float64)
    sims = np.full(len(store), -np.inf)
    best_shift = np.zeros(len(store), dtype=int)
    for i in sorted(shifts, key=abs):
        q = extract_embedding(model, shift_cqt_bins(cqt.values, i)).astype(np.float64)
        s = refs @ q
        better = s > sims
        sims[better], best_shift[better] = s[better], i
    id_rank = np.argsort(np.argsort(np.array(store.ids, dtype=object), kind="stable"))
    order = np.lexsort((id_rank, -sims))[: args.topk]
    rows = [{"rank": r + 1, "id": store.ids[j], "similarity": float(sims[j]), "shift": int(best_shift[j])} for r, j in enumerate(order)]
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        for row in rows:
            print(f"{row['rank']:3d}  {row['id']:<24} {row['similarity']:.4f}  shift {row['shift']:+d}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    reports = run_suite(seed=args.seed, inject_broken=args.inject_broken)
    for r in reports:
        print(r)
    ok = all(r.passed for r in reports)
    print("all gradient checks passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coverid", description="Cover song identification toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(func=fn)
        return sp

    def factor_flags(sp, default):
        sp.add_argument("--factor", type=int, default=default, help="time downsampling factor (100 or 20)")
        sp.add_argument("--log", action="store_true", help="log-compress the normalized CQT")

    sp = add("synth", cmd_synth, "render a synthetic cover corpus")
    sp.add_argument("--cliques", type=int, required=True)
    sp.add_argument("--versions", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--wav", action="store_true", help="also write rendered audio")
    factor_flags(sp, 20)

    sp = add("extract", cmd_extract, "compute .cqt features from WAV files")
    sp.add_argument("--in", dest="inputs", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    factor_flags(sp, 100)

    sp = add("train", cmd_train, "train a ResNet-IBN model")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--preset", choices=("mini", "full"), default="mini")
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--out", required=True)
    sp.add_argument("--loss", choices=tuple(LOSS_FLAGS), default="bnneck")
    sp.add_argument("--gem-split", action="store_true")
    sp.add_argument("--embed-dim", type=int, default=0)
    sp.add_argument("--crop-len", type=int, default=0, help="override the preset crop length")
    sp.add_argument("--no-val", action="store_true", help="skip per-epoch validation mAP")

    sp = add("embed", cmd_embed, "embed a manifest split with a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-projection", action="store_true")

    sp = add("evaluate", cmd_evaluate, "score an embedding file (mAP, P@10, MR1)")
    sp.add_argument("--emb", required=True, help="query embeddings")
    sp.add_argument("--refs", help="reference embeddings (default: the queries themselves)")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--exclude-self", action="store_true")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--out", help="write the JSON report here")
    sp.add_argument("--baseline", type=int, default=0, metavar="N", help="also report a label-permutation baseline")

    sp = add("query", cmd_query, "rank stored embeddings against a WAV query")
    sp.add_argument("--emb", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--wav", required=True)
    sp.add_argument("--topk", type=int, default=10)
    sp.add_argument("--transpose-search", type=int, default=0, metavar="R")
    sp.add_argument("--json", action="store_true")
    factor_flags(sp, 100)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op")
    sp.add_argument("--inject-broken", action="store_true", help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("coverid: a subcommand is required")
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"coverid {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
