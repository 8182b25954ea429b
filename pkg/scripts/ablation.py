"""Loss-mode ablation on one synthetic corpus, averaged over training seeds.

    python scripts/ablation.py --corpus runs/desk/corpus --seeds 42 43 44

Prints a table of test mAP (test queries against all recordings, self
excluded) for classification only, triplet only, both losses on one feature,
and both losses split across the BNNeck.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from coverid.model import ModelConfig, build_model
from coverid.retrieval import embed_all, evaluate
from coverid.training import LabeledDataset, TrainConfig, train

MODES = ("cls_only", "tri_only", "joint_naive", "joint_bnneck")


def score(dataset, mode, seed, epochs):
    model = build_model(ModelConfig.mini(dataset.num_classes, bnneck=mode != "joint_naive"), seed=seed)
    result = train(model, dataset, TrainConfig.for_preset("mini", epochs=epochs, seed=seed, loss_mode=mode))
    refs = embed_all(result.best.build_model(), dataset.items())
    queries = refs.subset([e.id for e in dataset.entries if e.split == "test"])
    return evaluate(queries, refs, dataset.labels(), exclude_self=True).map


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[42, 43, 44])
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--modes", nargs="+", default=list(MODES), choices=MODES)
    ap.add_argument("--json", type=Path)
    args = ap.parse_args()

    ds = LabeledDataset.from_manifest(args.corpus / "manifest.jsonl")
    table = {}
    for mode in args.modes:
        table[mode] = [score(ds, mode, s, args.epochs) for s in args.seeds]
        maps = table[mode]
        print(f"{mode:<14} mean {np.mean(maps):.3f}  sd {np.std(maps):.3f}  " + " ".join(f"{m:.3f}" for m in maps), flush=True)
    if args.json:
        args.json.write_text(json.dumps({"seeds": args.seeds, "map": table}, indent=2) + "\n")


if __name__ == "__main__":
    main()
