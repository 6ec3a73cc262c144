"""Command-line interface.

Commands: prepare, train, sample, evaluate, accountant, fairness-run.
Exit codes: 0 success, 2 input or configuration error, 3 privacy budget
exhausted, 4 sampling produced zero rows. Every artifact embeds the
effective config hash and seed (JSON fields; a leading '# dptab ...'
comment line in CSVs, which the loader skips).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

from .accountant import calibrate_sigma, rdp_epsilon
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import DecodeError
from .config import ConfigError, RunConfig
from .evaluate import (
    BinningSpec,
    dcr_histogram,
    fairness_metrics,
    gbt_downstream,
    kway_tvd,
)
from .sampler import PromptSpec, sample_fair_mixture, sample_rows
from .schema import (
    SchemaError,
    infer_schema,
    load_csv,
    load_schema,
    save_csv,
    save_schema,
    split_table,
)
from .trainer import two_stage_finetune

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BUDGET = 3
EXIT_EMPTY = 4


class BudgetExhausted(RuntimeError):
    pass


class EmptyOutput(RuntimeError):
    pass


def _overrides(args: argparse.Namespace, extra: dict[str, str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for k, v in extra.items():
        if v is not None:
            out[k] = str(v)
    return out


def _config(args: argparse.Namespace, extra: dict[str, str] | None = None) -> RunConfig:
    return RunConfig.build(
        file_path=getattr(args, "config", None),
        overrides=_overrides(args, extra or {}),
    )


def _stamp(cfg: RunConfig) -> str:
    return f"dptab config={cfg.hash()} seed={cfg.seed()}"

def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _config(args, {"seed": args.seed, "prepare.train_fraction": args.train_fraction})
    os.makedirs(args.out, exist_ok=True)
    if args.schema:
        schema = load_schema(args.schema)
    else:
        schema = infer_schema(args.csv, target=args.target, sensitive=args.sensitive)
    table = load_csv(args.csv, schema)
    train, test = split_table(
        table, float(cfg["prepare.train_fraction"]), seed=cfg.seed()
    )
    save_schema(schema, os.path.join(args.out, "schema.json"))
    save_csv(train, os.path.join(args.out, "train.csv"), comment=_stamp(cfg))
    save_csv(test, os.path.join(args.out, "test.csv"), comment=_stamp(cfg))
    _write_json(
        os.path.join(args.out, "prepare_report.json"),
        {
            "config_hash": cfg.hash(),
            "seed": cfg.seed(),
            "rows_total": len(table),
            "rows_train": len(train),
            "rows_test": len(test),
            "features": len(schema.features),
            "target": schema.target,
            "sensitive": schema.sensitive,
        },
    )
    print(f"prepared {len(train)}/{len(test)} rows into {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    extra = {
        "seed": args.seed,
        "stage2.epsilon": args.epsilon,
        "stage2.delta": args.delta,
    }
    if args.non_private:
        extra["stage2.non_private"] = "true"
    if args.mode:
        extra["mode"] = args.mode
    cfg = _config(args, extra)
    schema = load_schema(args.schema)
    table = load_csv(args.train, schema)
    os.makedirs(args.out, exist_ok=True)
    result = two_stage_finetune(table, cfg.train_config())
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed(), "command": "train"}
    save_checkpoint(
        os.path.join(args.out, "checkpoint.dptab"),
        result.state,
        result.vocab,
        result.schema,
        result.ledger,
        meta=meta,
    )
    report = result.report.to_dict()
    report.update(meta)
    _write_json(os.path.join(args.out, "train_report.json"), report)
    spent = result.report.spent_epsilon
    spent_text = "non-private" if math.isinf(spent) else f"eps={spent:.4f}"
    print(
        f"trained: {result.report.steps_executed} private steps, {spent_text}, "
        f"final compliance={result.report.final_compliance:.3f}"
    )
    if result.report.halted_on_budget:
        raise BudgetExhausted("training halted early: privacy budget exhausted")
    if not result.report.non_private and spent > result.report.epsilon_target * (
        1.0 + 1e-9
    ):
        raise BudgetExhausted(
            f"spent epsilon {spent} exceeds target {result.report.epsilon_target}"
        )
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    extra = {
        "seed": args.seed,
        "sample.temperature": args.temperature,
        "sample.max_retries": args.retries,
    }
    cfg = _config(args, extra)
    bundle = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    temperature = float(cfg["sample.temperature"])
    retries = int(cfg["sample.max_retries"])
    if args.fair_fraction is not None:
        table, plan, parts = sample_fair_mixture(
            bundle.state,
            bundle.vocab,
            bundle.schema,
            args.n,
            float(args.fair_fraction),
            seed=cfg.seed(),
            temperature=temperature,
            max_retries=retries,
        )
        report = {
            "mode": "fair_mixture",
            "controlled_fraction": float(args.fair_fraction),
            "budget": plan.budget,
            "reference_dpdiff": plan.reference_dpdiff,
            "predicted_dpdiff": plan.predicted_dpdiff,
            "cells": [list(c) for c in plan.cells],
            "parts": parts["parts"],
            "rows_emitted": len(table),
        }
    else:
        fixed = []
        for item in args.fix or []:
            if "=" not in item:
                raise SchemaError(f"--fix expects Feature=Value, got {item!r}")
            k, v = item.split("=", 1)
            fixed.append((k.strip(), v.strip()))
        prompt = PromptSpec(
            mode="value_specified" if fixed else "random_init",
            fixed=tuple(fixed),
            temperature=temperature,
            max_retries=retries,
        )
        table, rep = sample_rows(
            bundle.state, bundle.vocab, bundle.schema, args.n, prompt, seed=cfg.seed()
        )
        report = rep.to_dict()
    report.update({"config_hash": cfg.hash(), "seed": cfg.seed(), "command": "sample"})
    _write_json(os.path.join(args.out, "sample_report.json"), report)
    save_csv(table, os.path.join(args.out, "synthetic.csv"), comment=_stamp(cfg))
    print(f"sampled {len(table)}/{args.n} rows into {args.out}")
    if len(table) == 0:
        raise EmptyOutput("sampling produced zero schema-valid rows")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    extra = {"seed": args.seed}
    if args.full_grid:
        extra["eval.full_grid"] = "true"
    if args.no_downstream:
        extra["eval.downstream"] = "false"
    if args.max_subsets is not None:
        extra["eval.tvd_max_subsets"] = args.max_subsets
    cfg = _config(args, extra)
    schema = load_schema(args.schema)
    synthetic = load_csv(args.synthetic, schema)
    reference = load_csv(args.reference, schema)
    os.makedirs(args.out, exist_ok=True)
    binning = BinningSpec.from_table(reference, int(cfg["eval.quantile_groups"]))
    max_subsets = int(cfg["eval.tvd_max_subsets"])
    tvd1 = kway_tvd(synthetic, reference, 1, binning, max_subsets, cfg.seed())
    tvd2 = kway_tvd(synthetic, reference, 2, binning, max_subsets, cfg.seed())
    dcr = dcr_histogram(synthetic, reference, bins=int(cfg["eval.dcr_bins"]))
    report: dict = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed(),
        "command": "evaluate",
        "rows_synthetic": len(synthetic),
        "rows_reference": len(reference),
        "tvd_1way": tvd1.mean,
        "tvd_2way": tvd2.mean,
        "dcr": dcr.to_dict(),
    }
    with open(os.path.join(args.out, "tvd_subsets.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"# {_stamp(cfg)}\n")
        fh.write("k,features,tvd\n")
        for res in (tvd1, tvd2):
            for names, value in sorted(res.per_subset.items()):
                fh.write(f"{res.k},{'|'.join(names)},{value:.6f}\n")
    with open(
        os.path.join(args.out, "dcr_histogram.csv"), "w", encoding="utf-8"
    ) as fh:
        fh.write(f"# {_stamp(cfg)}\n")
        fh.write("bin_low,bin_high,count\n")
        for lo, hi, c in zip(dcr.bin_edges[:-1], dcr.bin_edges[1:], dcr.histogram):
            fh.write(f"{lo:.6f},{hi:.6f},{int(c)}\n")
    if args.test and bool(cfg["eval.downstream"]):
        test = load_csv(args.test, schema)
        down = gbt_downstream(
            synthetic,
            test,
            full_grid=bool(cfg["eval.full_grid"]),
            folds=int(cfg["eval.folds"]),
            seed=cfg.seed(),
        )
        fair = fairness_metrics(test, predictions=down.probabilities)
        synth_fair = fairness_metrics(synthetic)
        report["downstream"] = down.to_dict()
        report["fairness"] = fair.to_dict()
        report["synthetic_data_dpdiff"] = synth_fair.data_dpdiff
    _write_json(os.path.join(args.out, "eval_report.json"), report)
    print(
        f"tvd1={tvd1.mean:.4f} tvd2={tvd2.mean:.4f} "
        f"dcr_median={dcr.median:.4f} -> {args.out}"
    )
    return EXIT_OK


def cmd_accountant(args: argparse.Namespace) -> int:
    if (args.sigma is None) == (args.epsilon is None):
        raise ConfigError("give exactly one of --sigma (report eps) or --epsilon (calibrate)")
    if args.sigma is not None:
        eps = rdp_epsilon(args.q, args.sigma, args.steps, args.delta)
        payload = {
            "epsilon": eps,
            "q": args.q,
            "sigma": args.sigma,
            "steps": args.steps,
            "delta": args.delta,
        }
    else:
        sigma = calibrate_sigma(args.epsilon, args.delta, args.q, args.steps)
        payload = {
            "sigma": sigma,
            "epsilon_target": args.epsilon,
            "q": args.q,
            "steps": args.steps,
            "delta": args.delta,
        }
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_fairness_run(args: argparse.Namespace) -> int:
    cfg = _config(args, {"seed": args.seed})
    bundle = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    rhos = [float(r) for r in args.rhos.split(",") if r.strip() != ""]
    if not rhos:
        raise ConfigError("--rhos is empty")
    test = load_csv(args.test, bundle.schema) if args.test else None
    temperature = float(cfg["sample.temperature"])
    retries = int(cfg["sample.max_retries"])
    rows_out: list[dict] = []
    for i, rho in enumerate(rhos):
        table, plan, _parts = sample_fair_mixture(
            bundle.state,
            bundle.vocab,
            bundle.schema,
            args.n,
            rho,
            seed=cfg.seed() + 10_000 * i,
            temperature=temperature,
            max_retries=retries,
        )
        if len(table) == 0:
            raise EmptyOutput(f"rho={rho}: zero rows sampled")
        entry = {
            "rho": rho,
            "budget": plan.budget,
            "rows": len(table),
            "uncontrolled_dpdiff": plan.reference_dpdiff,
            "planned_dpdiff": plan.predicted_dpdiff,
            "data_dpdiff": fairness_metrics(table).data_dpdiff,
        }
        save_csv(
            table,
            os.path.join(args.out, f"synthetic_rho{rho:g}.csv"),
            comment=f"{_stamp(cfg)} rho={rho:g}",
        )
        if test is not None:
            down = gbt_downstream(
                table,
                test,
                full_grid=bool(cfg["eval.full_grid"]),
                folds=int(cfg["eval.folds"]),
                seed=cfg.seed(),
            )
            fair = fairness_metrics(test, predictions=down.probabilities)
            entry.update(
                {
                    "accuracy": down.accuracy,
                    "auc": down.auc,
                    "model_dpdiff": fair.model_dpdiff,
                    "eo_diff": fair.eo_diff,
                }
            )
        rows_out.append(entry)
    cols = list(rows_out[0].keys())
    with open(os.path.join(args.out, "fairness_sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"# {_stamp(cfg)}\n")
        fh.write(",".join(cols) + "\n")
        for e in rows_out:
            fh.write(",".join(_fmt(e.get(c)) for c in cols) + "\n")
    _write_json(
        os.path.join(args.out, "fairness_report.json"),
        {
            "config_hash": cfg.hash(),
            "seed": cfg.seed(),
            "command": "fairness-run",
            "sweep": rows_out,
        },
    )
    print(f"fairness sweep over rhos {rhos} -> {args.out}")
    return EXIT_OK


def _fmt(v: object) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dptab",
        description="Differentially private tabular synthesis with a small language model",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="config file of key = value lines")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )
        p.add_argument("--seed", type=int, help="run seed (mandatory)")

    p = sub.add_parser("prepare", help="infer schema, split, write train/test CSVs")
    common(p)
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", help="target feature (default: last column)")
    p.add_argument("--sensitive", help="sensitive feature for fairness")
    p.add_argument("--schema", help="reuse an existing schema.json")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="two-stage fine-tune on a training CSV")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--non-private", action="store_true", dest="non_private")
    p.add_argument("--mode", choices=["two_stage", "single_stage"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample synthetic rows from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float)
    p.add_argument("--retries", type=int)
    p.add_argument("--fix", action="append", metavar="FEATURE=VALUE")
    p.add_argument("--fair-fraction", type=float, dest="fair_fraction")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="fidelity/privacy/downstream metrics")
    common(p)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--reference", required=True, help="training CSV to compare against")
    p.add_argument("--test", help="held-out CSV for downstream metrics")
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-subsets", type=int, dest="max_subsets")
    p.add_argument("--full-grid", action="store_true", dest="full_grid")
    p.add_argument("--no-downstream", action="store_true", dest="no_downstream")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("accountant", help="epsilon for sigma, or calibrate sigma")
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sigma", type=float)
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("fairness-run", help="sweep controlled fractions")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--rhos", required=True, help="comma-separated fractions")
    p.add_argument("--test", help="held-out CSV for downstream fairness")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fairness_run)

    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BudgetExhausted as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except EmptyOutput as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except (
        ConfigError,
        SchemaError,
        CheckpointError,
        DecodeError,
        FileNotFoundError,
        IsADirectoryError,
        NotADirectoryError,
        ValueError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
