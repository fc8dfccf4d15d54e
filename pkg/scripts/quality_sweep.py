#!/usr/bin/env python3
"""Sweep background/donor quality pairs with the classical backend.

Reproduces the qualitative shape of the k=2 localization tables at desk
scale: strong cells where the donor's first compression is coarser than the
final one, collapse where the primary steps are too fine to leave traces.
"""

import argparse

import numpy as np

from qsplice.cli import PipelineOptions, run_pipeline
from qsplice.estimation import ClassicalBackend
from qsplice.forge import Box, ForgeRecipe, forge, make_texture
from qsplice.jpeg import GridShift, quality_to_matrix
from qsplice.metrics import TAMPERED, mcc


def run_cell(qf_bg, qf_donor, samples, seed0, size):
    mccs, tp = [], 0
    for i in range(samples):
        rng = np.random.default_rng(seed0 + i)
        span = size - 128 - 48
        recipe = ForgeRecipe(
            k=2, type="II", qf_background=qf_bg, qf_donors=[qf_donor], qf2=90,
            boxes=[Box(top=24 + int(rng.integers(span)), left=24 + int(rng.integers(span)),
                       h=128, w=128)],
            shift_background=GridShift(int(rng.integers(1, 8)), int(rng.integers(1, 8))),
            shift_donors=[GridShift(0, 0)],
            seed=seed0 + i,
        )
        src = make_texture(seed0 + 100 + i, (size, size))
        donor = make_texture(seed0 + 200 + i, (size, size))
        sample = forge(src, [donor], recipe)
        report, refined = run_pipeline(sample.image,
                                       ClassicalBackend(q2=quality_to_matrix(90)),
                                       PipelineOptions(seed=i))
        if report.decision == TAMPERED:
            tp += 1
            mccs.append(mcc(sample.gt, refined.labels))
    return (float(np.mean(mccs)) if mccs else float("nan")), tp


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--samples", type=int, default=5)
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    backgrounds = (85, 95, 98)
    donors = (60, 65, 75, 85, 95)
    print("QF1\\QF1,2 " + "".join(f"{d:>14}" for d in donors))
    for qf_bg in backgrounds:
        cells = []
        for qf_donor in donors:
            if qf_donor == qf_bg:
                cells.append(f"{'---':>14}")
                continue
            score, tp = run_cell(qf_bg, qf_donor, args.samples,
                                 args.seed + qf_bg * 101 + qf_donor, args.size)
            cells.append(f"{score:>9.3f}({tp:>2})")
        print(f"{qf_bg:>8} " + "".join(cells))


if __name__ == "__main__":
    main()
