"""How key-sensitive is a trained embedding, and how hard is the corpus without learning?

    python scripts/transposition_probe.py --corpus runs/desk/corpus --ckpt runs/desk/train_bnneck_42

Part one embeds every test recording under vertical CQT shifts of -6..6 bins
and prints the mean cosine to the unshifted embedding per shift. Part two
scores a learning-free reference on the same split: each recording's
time-averaged pitch profile, compared under the best of 21 bin shifts. The
gap between the two shows how much of the task is transposition invariance.
"""
import argparse
from pathlib import Path

import numpy as np

from coverid.retrieval import evaluate_similarities, extract_embedding
from coverid.synth import shift_cqt_bins
from coverid.training import LabeledDataset, load_checkpoint, resolve_checkpoint_dir


def shift_curve(model, items, shifts):
    base = np.array([extract_embedding(model, v) for _, v in items], dtype=np.float64)
    curve = {}
    for i in shifts:
        moved = np.array([extract_embedding(model, shift_cqt_bins(v, i)) for _, v in items], dtype=np.float64)
        curve[i] = float(np.mean(np.sum(base * moved, axis=1)))
    return curve


def profile_scores(ds, max_shift=10):
    items = ds.items()
    ids = [i for i, _ in items]
    prof = np.array([v.mean(axis=1) for _, v in items])
    prof /= np.linalg.norm(prof, axis=1, keepdims=True)
    plain = prof @ prof.T
    best = np.full_like(plain, -1.0)
    for i in range(-max_shift, max_shift + 1):
        moved = np.array([shift_cqt_bins(p[:, None], i)[:, 0] for p in prof])
        best = np.maximum(best, prof @ moved.T)
    test = [k for k, e in enumerate(ds.entries) if e.split == "test"]
    qids = [ids[k] for k in test]
    return {
        name: evaluate_similarities(S[test], qids, ids, ds.labels(), exclude_self=True).map
        for name, S in (("pitch profile", plain), ("pitch profile, best shift", best))
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", type=Path, required=True)
    ap.add_argument("--ckpt", type=Path)
    args = ap.parse_args()
    ds = LabeledDataset.from_manifest(args.corpus / "manifest.jsonl")
    if args.ckpt:
        model = load_checkpoint(resolve_checkpoint_dir(args.ckpt)).build_model()
        for i, c in shift_curve(model, ds.items("test"), range(-6, 7)).items():
            print(f"shift {i:+d}  mean cosine {c:.3f}")
    for name, m in profile_scores(ds).items():
        print(f"{name:<26} test mAP {m:.3f}")


if __name__ == "__main__":
    main()
