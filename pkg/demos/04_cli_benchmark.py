"""Drive the benchmark through its command line, step by step.

Uses the bundled demo config (small data, 3 epochs) so it finishes in a few
minutes.  The same steps work with ``demos/phantom_benchmark.yaml`` for the
full desk-scale run.
Run: python3 demos/04_cli_benchmark.py [OUT_DIR]
"""
import sys
from pathlib import Path

from uadbench.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/cli-demo")
common = ["--seed", "0", "--out", str(out)]

for step in ("synth", "train", "score", "evaluate", "report"):
    print(f"$ uadbench {step} {' '.join(common)}")
    code = main([step, *common])
    if code:
        sys.exit(code)

print((out / "report" / "lesion.csv").read_text())

# a bad config is reported as a JSON line on stderr with a nonzero exit code
bad = out / "bad.yaml"
bad.write_text("schema_version: 1\nmethods: [{tag: AE_dense, scorers: [gradient]}]\n")
print("exit code for an inadmissible method/scorer pair:", main(["run", "--config", str(bad)]))
