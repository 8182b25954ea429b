"""End-to-end desk run: synthesize, train the mini model, embed and score the test split.

    python scripts/desk_run.py --out runs/desk --seed 42

Every stage goes through the ``coverid`` command line, so the run is exactly
what a user would type. A JSON summary with timings lands in ``<out>/summary.json``.
"""
import argparse
import json
import time
from pathlib import Path

from coverid.cli import main


def stage(name, argv, timings):
    t0 = time.perf_counter()
    code = main(argv)
    timings[name] = round(time.perf_counter() - t0, 1)
    if code != 0:
        raise SystemExit(f"{name} failed with exit code {code}")


def run(out: Path, seed: int, cliques: int, versions: int, epochs: int, loss: str) -> dict:
    corpus, ckpt = out / "corpus", out / f"train_{loss}_{seed}"
    manifest = corpus / "manifest.jsonl"
    timings = {}
    if not manifest.exists():
        stage("synth", ["synth", "--cliques", str(cliques), "--versions", str(versions), "--seed", str(seed), "--out", str(corpus)], timings)
    stage("train", ["train", "--manifest", str(manifest), "--preset", "mini", "--loss", loss,
                    "--epochs", str(epochs), "--seed", str(seed), "--out", str(ckpt)], timings)
    for split in ("test", "all"):
        stage(f"embed_{split}", ["embed", "--ckpt", str(ckpt), "--manifest", str(manifest), "--split", split,
                                 "--out", str(ckpt / f"{split}.emb")], timings)
    report = ckpt / "test_report.json"
    stage("evaluate", ["evaluate", "--emb", str(ckpt / "test.emb"), "--refs", str(ckpt / "all.emb"),
                       "--manifest", str(manifest), "--exclude-self", "--baseline", "100", "--out", str(report)], timings)
    doc = json.loads(report.read_text())
    summary = {
        "seed": seed,
        "loss": loss,
        "map": doc["map"],
        "p_at_10": doc["p_at_10"],
        "mr1": doc["mr1"],
        "baseline_map": doc["baseline_map"],
        "seconds": timings,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--cliques", type=int, default=30)
    ap.add_argument("--versions", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--loss", default="bnneck", choices=("cls", "tri", "naive", "bnneck"))
    args = ap.parse_args()
    s = run(args.out, args.seed, args.cliques, args.versions, args.epochs, args.loss)
    print(json.dumps(s, indent=2))
