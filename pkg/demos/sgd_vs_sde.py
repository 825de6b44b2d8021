#!/usr/bin/env python3
"""Paired-seed comparison of SGD and its diffusion approximation.

Trains logistic regression with both update rules from identical datasets
and initial points, then reports the seed-averaged terminal gap. The same
experiment runs from the command line as

    gradnoise compare --config compare.json --out outdir

with the dict below as the JSON config.
"""

from gradnoise import load_experiment_config
from gradnoise.harness import cmd_compare

RAW = {
    "problem": {"family": "logistic", "dim": 20, "separation": 2.0,
                "pop_oracle_size": 10000},
    "train": {"n": 2000, "b": 20, "lr": 0.2, "steps": 3000,
              "log_every": 500},
    "compare_seeds": 6,
}


def main():
    config = load_experiment_config(RAW)
    summary = cmd_compare(config)
    print(f"seeds averaged: {summary['n_seeds']}  "
          f"diverged: {summary['diverged_runs']}")
    print(f"terminal test loss  sgd {summary['terminal_test_loss_sgd']:.4f}  "
          f"sde {summary['terminal_test_loss_sde']:.4f}  "
          f"|diff| {summary['test_loss_abs_diff']:.4f}")
    print(f"terminal accuracy   sgd {summary['terminal_accuracy_sgd']:.4f}  "
          f"sde {summary['terminal_accuracy_sde']:.4f}  "
          f"|diff| {summary['accuracy_abs_diff']:.4f}")


if __name__ == "__main__":
    main()
