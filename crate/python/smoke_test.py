#!/usr/bin/env python3
"""Smoke test for the madmm_py extension module.

Builds nothing itself: expects `cargo build --release -p madmm-py` to have
produced `target/release/libmadmm_py.so`. The library is copied next to a
temporary directory under the import name `madmm_py.so` and imported from
there, then a small end-to-end solve is exercised.

Run from the repository root (or any directory):

    cargo build --release -p madmm-py
    python3 python/smoke_test.py
"""

from __future__ import annotations

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path


def import_module():
    repo_root = Path(__file__).resolve().parent.parent
    built = repo_root / "target" / "release" / "libmadmm_py.so"
    if not built.exists():
        sys.exit(f"missing {built}; run `cargo build --release -p madmm-py` first")
    out_dir = Path(tempfile.mkdtemp(prefix="madmm_py_"))
    shutil.copy2(built, out_dir / "madmm_py.so")
    sys.path.insert(0, str(out_dir))
    import madmm_py  # noqa: E402

    return madmm_py


def main() -> None:
    madmm_py = import_module()
    print(f"imported madmm_py {madmm_py.__version__}")

    # Construction and metadata.
    problem = madmm_py.Problem("example2", 4)
    assert problem.name == "example2"
    assert problem.top_level == 4
    assert math.isclose(problem.alpha, 1e-3)
    a, b = problem.bounds
    assert a < b
    state, control = problem.dofs(3)
    assert state == 49 and control == 81, (state, control)
    assert problem.mesh_size(3) < problem.mesh_size(2)

    # A small multi-level solve.
    record = problem.solve("madmm", 3, eta_tol=1e-5)
    print(f"solve: {record!r}")
    assert record.termination == "tolerance"
    assert record.final_eta < 1e-5
    assert record.algorithm == "madmm"
    assert record.iterations == len(record.eta_history())
    assert max(record.level_history()) == 3

    # The splitting variable respects the box.
    z = record.z
    assert len(z) == control
    assert all(a - 1e-15 <= v <= b + 1e-15 for v in z)

    # Error against the manufactured control decreases with refinement.
    e2 = problem.error_vs_exact(2, problem.solve("madmm", 2, eta_tol=1e-5).z)
    e3 = problem.error_vs_exact(3, z)
    assert 0 < e3 < e2, (e2, e3)
    # At these very coarse levels the iteration error dominates, so only the
    # sign of the slope is meaningful here; the benchmark suite measures
    # real convergence orders on levels 4+.
    order = madmm_py.eoc(problem.mesh_size(2), e2, problem.mesh_size(3), e3)
    print(f"errors: E(2)={e2:.3e}, E(3)={e3:.3e}, EOC={order:.2f}")
    assert math.isfinite(order) and order > 0.0

    # Fixed-mesh drivers agree with the multi-level one at the same level.
    classical = problem.solve("classical", 3, eta_tol=1e-5)
    diff = max(abs(x - y) for x, y in zip(classical.u, record.u))
    print(f"classical vs madmm max nodal gap: {diff:.2e}")
    assert classical.termination == "tolerance"
    assert diff < 1e-3

    # Row dictionaries and serialization round-trip.
    rows = record.rows()
    assert rows[0]["k"] == 0 and rows[0]["level"] == 3
    assert set(rows[0]) >= {"eta1", "eta5", "R", "delta_norm"}
    round_trip = madmm_py.RunRecord.from_json(record.to_json())
    assert round_trip.u == record.u
    assert json.loads(record.to_json())["termination"] == "tolerance"
    header = record.csv().splitlines()[0]
    assert header.startswith("k,level,dofs,eta1"), header

    print("smoke test passed")


if __name__ == "__main__":
    main()
