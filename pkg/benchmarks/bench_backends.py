"""Wall-clock comparison of the numba and numpy kernel backends.

Usage: ``python benchmarks/bench_backends.py [--repeat 3] [--quick]``
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from sofo.analysis import optimal_path
from sofo.config import build_instance
from sofo.engine import run_replications
from sofo.powergrid import ieee33, solve_power_flow_batch
from sofo.rng import RandomStream

CONFIGS = Path(__file__).parents[1] / "configs"


def _instance(name, horizon):
    return build_instance(json.loads((CONFIGS / name).read_text()), 1, horizon=horizon)


def case_ofo(scale):
    inst = _instance("mse_sweep.json", 20_000 * scale)
    u0 = np.zeros((8, 2))
    return lambda b: run_replications(u0, inst.world, inst.cset, inst.obj, inst.algo, RandomStream(0), backend=b)


def case_oracle(scale):
    inst = _instance("tracking.json", 5_000 * scale)
    args = inst.obj, inst.world.compliance, inst.world.plant, inst.cset, inst.algo.horizon
    return lambda b: optimal_path(*args, backend=b)


def case_bfs(scale):
    c = ieee33()
    rng = np.random.default_rng(0)
    S = c.load_pu * rng.uniform(0.5, 1.3, (200 * scale, c.n_nodes))
    return lambda b: solve_power_flow_batch(c, S, backend=b)


CASES = {"ofo_replications": case_ofo, "oracle_path": case_oracle, "bfs_power_flow": case_bfs}


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = p.parse_args(argv)
    scale = 1 if args.quick else 5
    print(f"{'kernel':<18}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}")
    for name, make in CASES.items():
        run = make(scale)
        run("numba")  # compile outside the timed region
        t_np = best_of(lambda: run("numpy"), args.repeat)
        t_nb = best_of(lambda: run("numba"), args.repeat)
        print(f"{name:<18}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
