#!/usr/bin/env python3
"""Smoke test for the p2pclear Python extension.

Builds the cdylib if needed, copies it next to this script as an importable
module, then runs a generate / select / clear / oracle round trip.
"""

import math
import shutil
import subprocess
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
ROOT = HERE.parent
MODULE = HERE / "p2pclear.so"


def build_module():
    lib = ROOT / "target" / "release" / "libp2pclear.so"
    if not lib.exists():
        print("building the extension (cargo build -p p2pclear-py --release)...")
        subprocess.run(
            ["cargo", "build", "-p", "p2pclear-py", "--release"],
            cwd=ROOT,
            check=True,
        )
    shutil.copy2(lib, MODULE)


def main():
    build_module()
    sys.path.insert(0, str(HERE))
    import p2pclear

    inst = p2pclear.Instance.generate(template="ieee15", seed=7)
    assert inst.producers == 7 and inst.consumers == 7 and inst.edges == 49, repr(inst)
    print(f"generated {inst!r} (spec hash {inst.spec_hash})")

    outcome = p2pclear.solve(inst)
    assert outcome.converged, outcome.warnings
    assert outcome.mismatch <= 1e-3
    print(f"cleared: {outcome!r}, mismatch {outcome.mismatch:.2e}")

    reference = p2pclear.solve_centralized(inst, tol=1e-7)
    rel = abs(outcome.welfare - reference.welfare) / abs(reference.welfare)
    assert rel < 5e-3, f"welfare gap {rel:.3e}"
    print(f"oracle agrees: {reference!r}, relative gap {rel:.2e}")

    pruned, (before, after) = inst.select(benchmark=0.0)
    assert after < before
    pruned_outcome = p2pclear.solve(pruned)
    assert pruned_outcome.converged
    loss = abs(outcome.welfare - pruned_outcome.welfare) / abs(outcome.welfare)
    assert loss < 0.01, f"selection lost {loss:.3%} welfare"
    print(f"selection kept {after}/{before} pairs, welfare loss {loss:.4%}")

    # plain vs accelerated ordering on the same market
    plain = p2pclear.solve(inst, accelerated=False)
    assert plain.converged and outcome.iterations <= plain.iterations
    print(f"accelerated {outcome.iterations} vs plain {plain.iterations} iterations")

    # the normalized alpha row of the demo's first consumer keeps partners
    # {2, 3, 6} at benchmark 0
    row = [0.54, 0.71, 0.60, 0.54, 0.42, 0.64, 0.43]
    normalized = p2pclear.normalize_coefficients(row)
    kept = [i + 1 for i, v in enumerate(normalized) if v >= 0.0]
    assert kept == [2, 3, 6], kept

    # momentum scalar dominates k^2 / 2
    gamma, ok = 1.0, True
    for k in range(1, 2000):
        ok = ok and gamma >= k * k / 2
        gamma = p2pclear.gamma_next(k, gamma)
    assert ok and not math.isnan(gamma)

    # JSON round trip
    again = p2pclear.Instance.from_json(inst.to_json())
    assert again.edges == inst.edges

    print("smoke test PASSED")


if __name__ == "__main__":
    main()
