"""Sweep the bridge reconstruction weight and print the accuracy table (about a minute)."""
import sys
import tempfile

from synbridge.config import load_config
from synbridge.pipeline import Pipeline, format_sweep

workdir = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="synbridge-sweep-")
pipe = Pipeline(load_config(overrides=[f"run.workdir={workdir}"]))
pipe.synth_data()
pipe.distill()
pipe.mine()
rows, path = pipe.sweep_alpha(workers=4)
print(format_sweep(rows))
print("written to", path)
