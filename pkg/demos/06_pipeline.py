"""Full pipeline on a small synthetic corpus through the command line entry point."""

import sys
import tempfile
from pathlib import Path

from codetensor.cli import main

root = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="codetensor-"))
common = ["--corpus", str(root / "corpus"), "--work", str(root / "work")]
settings = ["--set", "corpus.n_benign=20", "--set", "corpus.n_malware=20", "--set", "gan.epochs=10",
            "--set", "split.modes=shared,disjoint"]

code = main(["pipeline", "--synth", *common, *settings])
history = root / "work" / "gan" / "shared" / "DT" / "seed0" / "history.csv"
if code == 0:
    code = main(["report", str(root / "work" / "report.csv"), "--history", str(history), "--plot", str(root / "curves")])
print(f"artifacts under {root}")
sys.exit(code)
