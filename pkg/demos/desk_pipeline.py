"""Run every phase at desk scale through the CLI: synth, textenc (three variants), bbox, gan, eval.

Usage: python demos/desk_pipeline.py [config] [out_dir]
"""
import sys
import time

from rpattn.cli import main

config = sys.argv[1] if len(sys.argv) > 1 else "configs/desk.json"
out = sys.argv[2] if len(sys.argv) > 2 else "runs/desk"

steps = [
    ["synth"],
    ["textenc", "--variants", "all"],
    ["bbox"],
    ["gan"],
    ["eval"],
]
for step in steps:
    start = time.perf_counter()
    code = main(step + ["--config", config, "--out", out])
    print(f"-- {step[0]} finished in {time.perf_counter() - start:.0f}s (exit {code})")
    if code:
        sys.exit(code)
print(open(f"{out}/textenc/comparison.txt").read())
print(open(f"{out}/bbox/summary.txt").read())
