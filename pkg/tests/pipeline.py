"""The fixture pipeline behind the golden artifacts.

    python3 tests/pipeline.py            # compare against tests/golden
    python3 tests/pipeline.py --update   # rewrite tests/golden

Manifests carry timings and absolute paths, so they are not compared.
"""
import argparse
import filecmp
import shutil
import sys
import tempfile
from pathlib import Path

from matvae import cli

HERE = Path(__file__).parent
FIX = HERE / "fixtures"
GOLDEN = HERE / "golden"

ARTIFACTS = [
    "bundle/msa.fasta", "bundle/weights.csv", "bundle/column_map.txt", "bundle/contact_mask.txt",
    "bundle/dms.csv", "bundle/bundle.json",
    "run/model.ckpt", "run/loss_trace.csv",
    "scores.csv", "metrics.csv",
]


def run_pipeline(work: Path) -> None:
    work = Path(work)
    steps = [
        ["preprocess", "--msa", FIX / "tiny.a2m", "--dms", FIX / "tiny_dms.csv", "--pdb", FIX / "tiny.pdb",
         "--out", work / "bundle"],
        ["train-msa", "--bundle", work / "bundle", "--out", work / "run", "--preset", "desk", "--seed", "0"],
        ["score", "--checkpoint", work / "run" / "model.ckpt", "--bundle", work / "bundle", "--out", work / "scores.csv"],
        ["evaluate", work / "scores.csv", "--out", work / "metrics.csv"],
    ]
    for argv in steps:
        code = cli.main([str(a) for a in argv])
        if code != 0:
            raise RuntimeError(f"pipeline step {argv[0]} exited with {code}")


def compare(work: Path, golden: Path = GOLDEN) -> list[str]:
    """Names of artifacts that differ from (or are missing in) ``golden``."""
    bad = []
    for name in ARTIFACTS:
        a, b = Path(work) / name, golden / name
        if not (a.is_file() and b.is_file() and filecmp.cmp(a, b, shallow=False)):
            bad.append(name)
    return bad


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--update", action="store_true")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        run_pipeline(Path(tmp))
        if args.update:
            for name in ARTIFACTS:
                dest = GOLDEN / name
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(Path(tmp) / name, dest)
            print(f"wrote {len(ARTIFACTS)} artifacts to {GOLDEN}")
            return 0
        bad = compare(Path(tmp))
    print("identical" if not bad else "differs: " + ", ".join(bad))
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
