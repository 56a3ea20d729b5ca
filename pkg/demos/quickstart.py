"""Run every stage on the bundled synthetic config and print the evaluation.

    python demos/quickstart.py [workdir]
"""
import sys
import tempfile

from synbridge.config import load_config
from synbridge.pipeline import Pipeline


def main():
    workdir = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="synbridge-")
    pipe = Pipeline(load_config(overrides=[f"run.workdir={workdir}"]))

    pipe.synth_data()
    print("stage 1 checkpoint:", pipe.distill())
    print("descriptors:", pipe.mine(), f"({pipe.last_provider_requests} provider requests)")
    print("bridge:", pipe.bridge())
    print("fusion heads:", pipe.fuse())

    report, path = pipe.evaluate(workers=4)
    print(f"\n5-way 1-shot over {report.episodes} episodes ({path.name})")
    print(f"  {'fused':<19}{report.mean_acc:6.2f} +- {report.ci95:.2f}")
    for name in sorted(report.baselines):
        acc, ci = report.summary(name)
        print(f"  {name:<19}{acc:6.2f} +- {ci:.2f}")


if __name__ == "__main__":
    main()
