"""Fit the uncertainty head and print uncertain area vs Dice per shift level, for a few seeds."""

import sys

from gmssl.uncertainty import UQConfig, eval_ood, train_uq


def main(seeds):
    for seed in seeds:
        cfg = UQConfig(seed=seed)
        head, history = train_uq(cfg)
        rep = eval_ood(head, cfg)
        print(f"seed {seed}: final loss {history[-1]:.3f}, pearson(area, dice) {rep['pearson_area_dice']:.3f}")
        for lv in rep["levels"]:
            print(f"  level {lv['level']}  area {lv['mean_area']:.3f}  dice {lv['mean_dice']:.3f}")


if __name__ == "__main__":
    main([int(s) for s in sys.argv[1:]] or [0, 1, 2])
