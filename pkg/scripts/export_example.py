"""Compose a small network with a Lipschitz spec and export it for an external verifier.

    python scripts/export_example.py OUT_DIR
"""

import argparse
from pathlib import Path

import numpy as np

from hyperspec.compose import self_compose
from hyperspec.graph import Hyperrectangle
from hyperspec.io import export_problem, save_problem
from hyperspec.networks import random_mlp
from hyperspec.specs import SpecParams, build_lipschitz
from hyperspec.verify import verify


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--K", type=float, default=2.0)
    args = ap.parse_args()
    net = random_mlp([2, 4, 1], np.random.default_rng(args.seed))
    domain = Hyperrectangle([0.0, 0.0], [1.0, 1.0])
    problem = self_compose(net, build_lipschitz(SpecParams(domain, 1, lipschitz_constant=args.K)))
    args.out.mkdir(parents=True, exist_ok=True)
    export_problem(problem, args.out / "model.onnx", args.out / "property.vnnlib", margin=1e-9)
    save_problem(problem, args.out / "composed.json")
    print((args.out / "property.vnnlib").read_text())
    print("local verdict:", verify(problem).to_json()["verdict"])


if __name__ == "__main__":
    main()
