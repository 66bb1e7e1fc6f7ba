"""Verify the hand-checked anchor cases with both the verifier and the exact oracle.

    python scripts/anchor_cases.py
"""

from hyperspec.anchors import anchor_cases
from hyperspec.oracle import oracle_minimum
from hyperspec.verify import Satisfied, verdict_tag, verify


def main():
    failures = 0
    print(f"{'case':28s} {'expected':9s} {'verify':9s} {'oracle':9s} {'bound / value':>14s}")
    for case in anchor_cases():
        problem = case.problem()
        got = verify(problem)
        ref = oracle_minimum(problem)
        value = got.certified_lower_bound if isinstance(got, Satisfied) else got.sat_value
        ok = verdict_tag(got) == verdict_tag(ref.verdict) == case.expected
        failures += not ok
        print(f"{case.name:28s} {case.expected:9s} {verdict_tag(got):9s} {verdict_tag(ref.verdict):9s} "
              f"{value:14.6g}  exact min {float(ref.minimum):.6g}{'' if ok else '  MISMATCH'}")
    raise SystemExit(1 if failures else 0)


if __name__ == "__main__":
    main()
