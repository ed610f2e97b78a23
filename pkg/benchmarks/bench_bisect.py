"""Compare the compiled and pure-Python bisection kernels.

Refines the PBE initial mesh through a fixed sequence of random mark sets
with each backend, checks that both produce identical meshes and reports
the best-of-``--repeat`` wall time per round and the speedup.

    python benchmarks/bench_bisect.py --rounds 6 --fraction 0.2
"""
import argparse
import time

import numpy as np

from afem_pbe import _kernels
from afem_pbe.mesh import NEUMANN, bisect, build_cube_mesh
from afem_pbe.problems import cube_classifier


def mark_sequence(rounds, fraction, seed):
    """Replay the refinement once to fix the mark sets (ids depend on the mesh)."""
    rng = np.random.default_rng(seed)
    mesh = build_cube_mesh([[-1, -1, -1], [1, 1, 1]], 8, cube_classifier(0.25), NEUMANN)
    meshes, marks = [], []
    for _ in range(rounds):
        ids = rng.choice(mesh.n_tets, size=max(1, int(fraction * mesh.n_tets)), replace=False)
        meshes.append(mesh)
        marks.append(ids)
        mesh = bisect(mesh, ids)
    return meshes, marks


def time_kernel(kernel, meshes, marks, repeat):
    times = np.empty((len(meshes), repeat))
    out = []
    for i, (mesh, ids) in enumerate(zip(meshes, marks)):
        for r in range(repeat):
            start = time.perf_counter()
            child = bisect(mesh, ids, kernel=kernel)
            times[i, r] = time.perf_counter() - start
        out.append(child)
    return times.min(axis=1), out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rounds", type=int, default=6)
    parser.add_argument("--fraction", type=float, default=0.2, help="share of tets marked per round")
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    meshes, marks = mark_sequence(args.rounds, args.fraction, args.seed)
    results = {name: time_kernel(k, meshes, marks, args.repeat) for name, k in _kernels.KERNELS.items()}
    if "cython" in results:
        for a, b in zip(results["python"][1], results["cython"][1]):
            assert np.array_equal(a.tets, b.tets) and np.array_equal(a.coords, b.coords), "backends disagree"

    names = sorted(results)
    print(f"default backend: {_kernels.BACKEND}")
    print("round  tets_in  tets_out  " + "  ".join(f"{n:>10s}_ms" for n in names) + ("  speedup" if len(names) == 2 else ""))
    for i, mesh in enumerate(meshes):
        ms = [1e3 * results[n][0][i] for n in names]
        row = f"{i:5d}  {mesh.n_tets:7d}  {results[names[0]][1][i].n_tets:8d}  " + "  ".join(f"{t:13.2f}" for t in ms)
        if len(names) == 2:
            row += f"  {results['python'][0][i] / results['cython'][0][i]:7.1f}x"
        print(row)
    if "cython" not in results:
        print("compiled extension not built; only the Python kernel was timed")


if __name__ == "__main__":
    main()
