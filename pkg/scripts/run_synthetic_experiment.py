#!/usr/bin/env python3
"""Full desk-scale experiment: synthesize the corpus, train three seeds,
evaluate on the held-out test split, aggregate, and render explanation
triptychs for a few bacterial test images.

Everything goes through the CLI entry points, so this doubles as a smoke
test of the command surface:

    python scripts/run_synthetic_experiment.py --out runs/synthetic

Expect roughly 10-20 minutes on a laptop CPU with the default settings.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from cbamnet.cli import main as cli  # noqa: E402


def sh(*argv) -> None:
    print(f"$ cbamnet {' '.join(argv)}")
    code = cli(list(argv))
    if code != 0:
        sys.exit(code)


def run(args) -> None:
    out = Path(args.out)
    data = out / "data"
    train_dir = out / "train"
    eval_dir = out / "eval"
    cam_dir = out / "gradcam"
    started = time.time()

    sh("synth", "--out", str(data), "--per-class", str(args.per_class),
       "--side", "64", "--seed", "0")
    sh("train", "--data", str(data), "--out", str(train_dir),
       "--seeds", args.seeds,
       "--phase1-epochs", str(args.phase1_epochs),
       "--phase2-epochs", str(args.phase2_epochs))
    sh("evaluate", "--data", str(data), "--run-dir", str(train_dir),
       "--out", str(eval_dir))
    sh("report", "--eval-dir", str(eval_dir), "--out", str(eval_dir))

    first_seed = args.seeds.split(",")[0]
    bacterial = sorted((data / "test" / "PNEUMONIA").glob("*bacteria*.png"))[:args.n_triptychs]
    sh("gradcam", "--checkpoint", str(train_dir / f"best_seed{first_seed}.ckpt"),
       "--out", str(cam_dir), "--images", *[str(p) for p in bacterial])

    print(f"\ndone in {time.time() - started:.0f}s")
    print((eval_dir / "report.txt").read_text())


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/synthetic")
    parser.add_argument("--per-class", type=int, default=200)
    parser.add_argument("--seeds", default="42,7,123")
    parser.add_argument("--phase1-epochs", type=int, default=6)
    parser.add_argument("--phase2-epochs", type=int, default=2)
    parser.add_argument("--n-triptychs", type=int, default=3)
    run(parser.parse_args())
