"""Alpha x graph-size ablation at reduced steps; CSV to stdout or the given path."""

import sys

from gmssl.core import atomic_write_text
from gmssl.trainer import SWEEP_COLUMNS, SweepConfig, TrainConfig, rows_to_csv, sweep_run

if __name__ == "__main__":
    sweep = SweepConfig(base=TrainConfig(steps=60), N=[8, 16], alpha=[0.7, 0.8, 0.9])
    rows, _ = sweep_run(sweep, threads=4)
    text = rows_to_csv(rows, SWEEP_COLUMNS)
    if len(sys.argv) > 1:
        atomic_write_text(sys.argv[1], text)
    else:
        sys.stdout.write(text)
