"""Command-line interface.

Subcommands: generate, train-imputer, train-predictor, evaluate, sweep,
serve. Every run reads a flat key=value config file and writes a JSON run
manifest (config hash, seeds, content hashes of inputs) next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .bundle import ModelBundle, file_sha256
from .cohort import (GeneratorConfig, default_schema, generate_cohort,
                     load_cohort, load_schema, save_cohort, split_cohort)
from .experiments import (DEFAULT_BUDGETS, DEFAULT_POLICIES, ExperimentConfig,
                          bins_spearman, sensing_sweep, sweep_checks,
                          train_stack, uncertainty_bins_experiment,
                          uncertainty_over_time_experiment)
from .imputer import ImputerConfig, train_imputer_mean, train_imputer_sigma
from .metrics import auroc
from .predictor import (AdversarialConfig, PredictorConfig, predict_risk,
                        prepare_sequences, train_predictor)
from .uncertainty import estimate_correlations


def parse_flat_config(text: str) -> dict:
    """Flat `key = value` lines; values are ints, floats, bools, quoted
    strings, or [comma, separated, lists] of those."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        out[key.strip()] = _parse_value(value.strip(), lineno)
    return out


def _parse_value(s: str, lineno: int):
    if s.startswith("[") and s.endswith("]"):
        inner = s[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(part.strip(), lineno) for part in inner.split(",")]
    if s.startswith('"') and s.endswith('"') and len(s) >= 2:
        return s[1:-1]
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"config line {lineno}: cannot parse value {s!r}") from None


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return parse_flat_config(f.read())


def _pick(cfg: dict, prefix: str, cls, **extra):
    """Build a dataclass from config keys sharing a prefix."""
    fields = cls.__dataclass_fields__
    kwargs = dict(extra)
    for key, value in cfg.items():
        if key.startswith(prefix):
            name = key[len(prefix):]
            if name in fields:
                if isinstance(value, list):
                    value = tuple(value)
                kwargs[name] = value
    return cls(**kwargs)


def build_experiment_config(cfg: dict) -> ExperimentConfig:
    gen = _pick(cfg, "cohort_", GeneratorConfig)
    icfg = _pick(cfg, "imputer_", ImputerConfig)
    adv = _pick(cfg, "adv_", AdversarialConfig)
    pcfg = _pick(cfg, "predictor_", PredictorConfig, adv=adv)
    kwargs = {}
    for key in ("policies", "budgets", "seeds", "split_fractions"):
        if key in cfg:
            kwargs[key] = tuple(cfg[key])
    for key in ("split_seed", "mc_samples", "score_masks", "uw_samples", "out_dir"):
        if key in cfg:
            kwargs[key] = cfg[key]
    return ExperimentConfig(cohort=gen, imputer=icfg, predictor=pcfg, **kwargs)


def write_manifest(out_dir, command: str, config_path, inputs: list,
                   outputs: list, seeds=None) -> None:
    manifest = {
        "command": command,
        "config": str(config_path) if config_path else None,
        "config_sha256": file_sha256(config_path) if config_path else None,
        "seeds": list(seeds) if seeds is not None else None,
        "inputs": {str(p): file_sha256(p) for p in inputs if os.path.exists(str(p))},
        "outputs": [str(p) for p in outputs],
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"manifest_{command.replace('-', '_')}.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    gen = _pick(cfg, "cohort_", GeneratorConfig)
    if args.seed is not None:
        gen = replace(gen, seed=args.seed)
    schema = default_schema()
    cohort = generate_cohort(gen, schema)
    save_cohort(cohort, args.out, schema)
    write_manifest(os.path.dirname(args.out) or ".", "generate", args.config,
                   inputs=[args.config], outputs=[args.out], seeds=[gen.seed])
    print(f"wrote {len(cohort)} patients to {args.out}")
    return 0


def _split_from_config(cfg, cohort):
    fractions = tuple(cfg.get("split_fractions", (0.7, 0.1, 0.2)))
    return split_cohort(cohort, fractions, seed=cfg.get("split_seed", 97))


def cmd_train_imputer(args) -> int:
    cfg = load_config(args.config)
    schema = load_schema(args.cohort)
    cohort = load_cohort(args.cohort, schema)
    train, _, _ = _split_from_config(cfg, cohort)
    icfg = _pick(cfg, "imputer_", ImputerConfig)
    model = train_imputer_mean(train, schema, icfg)
    model = train_imputer_sigma(train, model, icfg)
    os.makedirs(args.out, exist_ok=True)
    model.save(os.path.join(args.out, "imputer.bin"))
    with open(os.path.join(args.out, "schema.json"), "w", encoding="utf-8") as f:
        json.dump(schema.to_json(), f, indent=2)
    rho = estimate_correlations(train)
    rho.save(os.path.join(args.out, "rho.bin"))
    meta_path = os.path.join(args.out, "meta.json")
    meta = {"cohort_sha256": file_sha256(args.cohort), "predictors": []}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as f:
            meta.update(json.load(f))
        meta["cohort_sha256"] = file_sha256(args.cohort)
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    write_manifest(args.out, "train-imputer", args.config,
                   inputs=[args.config, args.cohort],
                   outputs=[os.path.join(args.out, "imputer.bin")])
    print(f"imputer trained on {len(train)} patients -> {args.out}")
    return 0


def cmd_train_predictor(args) -> int:
    cfg = load_config(args.config)
    bundle_dir = args.bundle
    schema = load_schema(args.cohort)
    cohort = load_cohort(args.cohort, schema)
    train, _, _ = _split_from_config(cfg, cohort)
    from .imputer import Imputer
    imputer = Imputer.load(os.path.join(bundle_dir, "imputer.bin"), schema)
    seqs = prepare_sequences(train, imputer)
    adv = _pick(cfg, "adv_", AdversarialConfig)
    pcfg = _pick(cfg, "predictor_", PredictorConfig, adv=adv)
    model = train_predictor(seqs, schema, args.mode, pcfg,
                            t_max=imputer.t_max, stats=imputer.stats,
                            metrics_path=os.path.join(bundle_dir,
                                                      f"metrics_{args.mode}.jsonl"))
    model.save(os.path.join(bundle_dir, f"predictor_{args.mode}.bin"))
    meta_path = os.path.join(bundle_dir, "meta.json")
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    modes = set(meta.get("predictors", []))
    modes.add(args.mode)
    meta["predictors"] = sorted(modes)
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    write_manifest(bundle_dir, "train-predictor", args.config,
                   inputs=[args.config, args.cohort],
                   outputs=[os.path.join(bundle_dir, f"predictor_{args.mode}.bin")])
    print(f"{args.mode} predictor trained -> {bundle_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    bundle = ModelBundle.load(args.bundle)
    schema = load_schema(args.cohort)
    if schema.hash() != bundle.schema.hash():
        print("error: cohort schema does not match the bundle's schema hash",
              file=sys.stderr)
        return 1
    cohort = load_cohort(args.cohort, schema)
    _, _, test = _split_from_config(cfg, cohort)
    model = bundle.default_predictor
    scores, labels = [], []
    for rec in test:
        dist = bundle.imputer.impute(rec)
        p = predict_risk(dist, rec.T, model)
        scores.extend(p)
        labels.extend(rec.Y.astype(bool))
    result = {"auroc": auroc(scores, labels), "n_patients": len(test),
              "n_points": len(scores), "mode": model.mode}
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "evaluation.json"), "w", encoding="utf-8") as f:
        json.dump(result, f, indent=2)
    write_manifest(args.out, "evaluate", args.config,
                   inputs=[args.config, args.cohort],
                   outputs=[os.path.join(args.out, "evaluation.json")])
    print(json.dumps(result))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    exp = build_experiment_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "sweep.csv")
    rows = sensing_sweep(exp, out_csv, workers=args.workers,
                         progress=lambda row: print(
                             f"  {row['policy']} budget={row['budget']} "
                             f"seed={row['seed']} auroc={row['auroc']:.4f}",
                             flush=True))
    write_manifest(args.out, "sweep", args.config, inputs=[args.config],
                   outputs=[out_csv], seeds=exp.seeds)
    print(f"sweep table: {out_csv} ({len(rows)} cells)")
    if args.check:
        problems = sweep_checks(rows, exp)
        for p in problems:
            print(f"check failed: {p}", file=sys.stderr)
        if problems:
            return 1
        print("all sweep checks passed")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(bundle_dir=args.bundle, cohort_path=args.cohort,
                     observation_log=args.observation_log)
    port = args.port or int(os.environ.get("SEPSENSE_PORT", "8080"))
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sepsense",
        description="risk prediction with propagated uncertainty and active lab sensing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic cohort CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train-imputer", help="train the imputation model")
    p.add_argument("--config", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="bundle directory")
    p.set_defaults(fn=cmd_train_imputer)

    p = sub.add_parser("train-predictor", help="train a risk model")
    p.add_argument("--config", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--mode", default="ras", choices=["ras_n", "ras_l", "ras"])
    p.set_defaults(fn=cmd_train_predictor)

    p = sub.add_parser("evaluate", help="evaluate a bundle on a cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="run the policy x budget x seed grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--check", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("serve", help="serve the clinician console API")
    p.add_argument("--bundle", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--observation-log", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
