"""Train the matching objective with default settings and print a learning curve.

    python scripts/run_ssl.py [steps] [seed]
"""

import sys

import numpy as np

from gmssl.trainer import TrainConfig, train_run


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
    cfg = TrainConfig(steps=steps, seed=seed)
    _, recs = train_run(cfg)
    acc = np.array([r.matching_accuracy for r in recs])
    for start in range(0, len(acc), 20):
        window = acc[start : start + 20]
        print(f"steps {start:4d}-{start + len(window) - 1:4d}  accuracy {window.mean():.3f}")


if __name__ == "__main__":
    main()
