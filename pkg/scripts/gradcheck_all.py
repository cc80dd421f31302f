"""Run the full finite-difference suite over several seeds and report the worst error per op."""

import sys

from bgrnet import gradsuite

worst = {}
for seed in range(5):
    for name, check in gradsuite.suite(seed).items():
        rep = check()
        worst[name] = max(worst.get(name, 0.0), rep.max_rel_err)
for name, err in worst.items():
    print(f"{name:28s} {err:10.3e}  {'ok' if err <= gradsuite.TOL else 'FAIL'}")
sys.exit(0 if all(e <= gradsuite.TOL for e in worst.values()) else 1)
