"""Run the verifier against the exact oracle on random small instances.

    python scripts/agreement_suite.py --count 50 --seed 0
"""

import argparse
import collections
import time

from hyperspec.benchmarks import agreement_suite
from hyperspec.oracle import oracle_minimum
from hyperspec.verify import Violated, verdict_tag, verify


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-units", type=int, default=12)
    args = ap.parse_args()
    tally = collections.Counter()
    slowest = (0.0, None)
    start = time.perf_counter()
    for inst in agreement_suite(args.count, args.seed, args.max_units):
        t0 = time.perf_counter()
        got = verify(inst.problem)
        t1 = time.perf_counter()
        ref = oracle_minimum(inst.problem)
        t2 = time.perf_counter()
        ok = verdict_tag(got) == verdict_tag(ref.verdict)
        if isinstance(got, Violated):
            ok = ok and got.sat_value < -1e-9
        tally[(inst.spec_name, verdict_tag(got), ok)] += 1
        slowest = max(slowest, (t2 - t0, f"{inst.spec_name}#{inst.index}"))
        if not ok:
            print(f"MISMATCH {inst.spec_name}#{inst.index}: verify={verdict_tag(got)} oracle={verdict_tag(ref.verdict)} min={float(ref.minimum)}")
        print(f"{inst.spec_name:24s} #{inst.index:<3d} units={inst.relu_units:<3d} "
              f"verify={verdict_tag(got):9s} ({t1 - t0:6.2f}s) oracle={verdict_tag(ref.verdict):9s} ({t2 - t1:6.2f}s)")
    print()
    for key, n in sorted(tally.items()):
        print(key, n)
    print(f"total {time.perf_counter() - start:.1f}s, slowest {slowest[1]} {slowest[0]:.2f}s")


if __name__ == "__main__":
    main()
