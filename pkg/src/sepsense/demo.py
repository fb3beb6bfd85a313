"""Build a small self-contained demo: cohort CSV + trained bundle.

Usage: python -m sepsense.demo OUTDIR [--patients N] [--seed S]

Produces everything `sepsense serve` needs, sized to train in well under a
minute; used by the console's end-to-end tests and for local demos.
"""

from __future__ import annotations

import argparse
import os
import sys

from .bundle import ModelBundle
from .cohort import GeneratorConfig, default_schema, generate_cohort, save_cohort, split_cohort
from .imputer import ImputerConfig, train_imputer_mean, train_imputer_sigma
from .predictor import AdversarialConfig, PredictorConfig, prepare_sequences, train_predictor
from .uncertainty import estimate_residual_correlations


def build_demo(out_dir: str, n_patients: int = 60, seed: int = 7) -> None:
    os.makedirs(out_dir, exist_ok=True)
    schema = default_schema()
    cohort = generate_cohort(GeneratorConfig(seed=seed, n_patients=n_patients,
                                             noise_frac=0.4), schema)
    train, val, test = split_cohort(cohort, (0.7, 0.1, 0.2), seed=97)

    icfg = ImputerConfig(d=8, hidden=16, epochs_mean=12, epochs_sigma=10,
                         batch_size=32, seed=seed)
    imputer = train_imputer_mean(train, schema, icfg)
    imputer = train_imputer_sigma(train, imputer, icfg)
    rho = estimate_residual_correlations(train, imputer)

    seqs = prepare_sequences(train, imputer)
    pcfg = PredictorConfig(d=8, hidden=16, epochs=12, batch_size=32, seed=seed,
                           adv=AdversarialConfig(alpha=0.9, lr=3e-3,
                                                 s_adv=0.15, n_adv=5))
    model = train_predictor(seqs, schema, "ras", pcfg, t_max=imputer.t_max,
                            stats=imputer.stats)

    bundle = ModelBundle(schema=schema, imputer=imputer,
                         predictors={"ras": model}, rho=rho,
                         meta={"demo": True, "seed": seed})
    bundle.save(os.path.join(out_dir, "bundle"))
    # serve the held-out patients so what-if exploration is non-trivial
    save_cohort(test, os.path.join(out_dir, "cohort.csv"), schema)
    print(f"demo written to {out_dir} ({len(test)} served patients)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir")
    parser.add_argument("--patients", type=int, default=60)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    build_demo(args.out_dir, n_patients=args.patients, seed=args.seed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
