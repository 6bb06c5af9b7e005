"""Batch command-line surface.

Every command reads a JSON config (flags override single fields), derives
all randomness from one mandatory 64-bit seed, and writes byte-stable
outputs: re-running a command with the same config and inputs reproduces
every file exactly.  Exit codes: 0 success, 2 usage or configuration
error, 3 convergence not reached.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    Dataset,
    Hyperparameters,
    RandomEffectsLayout,
    load_dataset,
    write_dataset,
)
from .diagnostics import auroc, classify, confusion_metrics, inclusion_probabilities, psrf
from .sampler import SamplerConfig, monitor_names, run_chains
from .selection import integrated_cv, select_re_model, _CRITERIA
from .simulate import (
    SD_SCENARIOS,
    ScenarioSpec,
    generate_basic,
    generate_fmdv_like,
    generate_mismatch,
)
from .store import read_chain, write_chain
from .subposterior import (
    PriorFamilySpec,
    combine_subposteriors,
    prior_correct,
    shard_fit,
)

__all__ = ["main"]


class UsageError(Exception):
    pass


class ConvergenceFailure(Exception):
    pass


def _dump_json(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    return cfg


def _require_seed(cfg: dict, args) -> int:
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = cfg.get("seed")
    if seed is None:
        raise UsageError("a seed is mandatory (config field 'seed' or --seed)")
    return int(seed)


def _jobs(cfg: dict, args) -> int:
    if getattr(args, "jobs", None) is not None:
        return args.jobs
    if "jobs" in cfg:
        return int(cfg["jobs"])
    return int(os.environ.get("ESABRE_JOBS", "1"))


def _layout_from_config(cfg: dict) -> RandomEffectsLayout:
    layout = cfg.get("layout")
    if not layout:
        raise UsageError("config must declare 'layout' with names and sizes")
    return RandomEffectsLayout(sizes=tuple(layout["sizes"]), names=tuple(layout["names"]))


def _dataset_from_config(cfg: dict) -> Dataset:
    for key in ("obs", "design"):
        if key not in cfg:
            raise UsageError(f"config missing '{key}' path")
        if not Path(cfg[key]).exists():
            raise UsageError(f"input file {cfg[key]} does not exist")
    truth = cfg.get("truth")
    if truth is not None and not Path(truth).exists():
        raise UsageError(f"truth file {truth} does not exist")
    return load_dataset(cfg["obs"], cfg["design"], _layout_from_config(cfg), truth_path=truth)


def _hyper_from_config(cfg: dict) -> Hyperparameters:
    raw = dict(cfg.get("hyperparameters", {}))
    for key in ("alpha_b", "beta_b"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return Hyperparameters(**raw)


def _sampler_config(cfg: dict, args, seed: int) -> SamplerConfig:
    raw = dict(cfg.get("sampler", {}))
    raw["seed"] = seed
    raw["jobs"] = _jobs(cfg, args)
    for flag in ("mode", "n_chains", "max_iterations", "thin", "block_size"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    return SamplerConfig(**raw)


def _write_scenario(path: Path, payload: dict):
    _dump_json(payload, path / "scenario.json")


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    seed = _require_seed(cfg, args)
    out = Path(args.out or cfg.get("out", ""))
    if not str(out):
        raise UsageError("an output directory is required")
    scenario = args.scenario or cfg.get("scenario")
    if scenario is None:
        raise UsageError("a scenario name is required")

    if scenario == "mismatch":
        data = generate_mismatch(args.n_obs or 500, bool(args.correlated), seed=seed)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "mismatch.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["y", "x_r", "x_ir", "pair_id"])
            for i in range(data.y.size):
                writer.writerow(
                    [repr(float(data.y[i])), repr(float(data.x_r[i])),
                     repr(float(data.x_ir[i])), int(data.pair_id[i])]
                )
        _write_scenario(out, {"scenario": scenario, "seed": seed,
                              "n": int(data.y.size), "correlated": bool(args.correlated),
                              "w_r": data.w_r})
        return 0

    overrides = {}
    for name, key in (
        ("n_strains", "n_strains"),
        ("n_obs", "n_obs"),
        ("n_variables", "n_variables"),
        ("n_factors", "n_factors"),
        ("sigma_y2", "sigma_y2"),
        ("sigma_eps2", "sigma_eps2"),
    ):
        value = getattr(args, name, None)
        if value is not None:
            overrides[key] = value
    if scenario in SD_SCENARIOS:
        spec = replace(SD_SCENARIOS[scenario], seed=seed, **overrides)
        data = generate_basic(spec)
    elif scenario == "basic":
        spec = ScenarioSpec(seed=seed, **overrides)
        data = generate_basic(spec)
    elif scenario == "fmdv":
        data = generate_fmdv_like(
            mu_w=args.mu_w if args.mu_w is not None else -0.3,
            sigma_eps2=args.sigma_eps2 if args.sigma_eps2 is not None else 0.2,
            seed=seed,
        )
        spec = None
    else:
        raise UsageError(f"unknown scenario {scenario!r}")

    write_dataset(data, out)
    payload = {
        "scenario": scenario,
        "seed": seed,
        "layout": {"names": list(data.layout.names), "sizes": list(data.layout.sizes)},
        "n_obs": data.n_obs,
        "n_pairs": data.n_pairs,
        "n_variables": data.n_variables,
    }
    if spec is not None:
        payload["spec"] = {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()
        }
    _write_scenario(out, payload)
    return 0


def _fit_and_store(data, hyper, config, out: Path):
    chains = run_chains(data, hyper, config)
    chains_dir = out / "chains"
    for store in chains:
        write_chain(store, config, chains_dir)
    incl = inclusion_probabilities(chains)
    names = monitor_names(data)
    traces = {name: [] for name in names}
    for c in chains:
        stacked = c.stacked()
        scalars = np.column_stack(
            [
                stacked["w0"], stacked["mu_w"], stacked["pi"], stacked["sigma_y2"],
                stacked["sigma_eps2"], stacked["sigma_w2"], stacked["sigma_b2"],
                stacked["b"],
            ]
        )
        for i, name in enumerate(names):
            traces[name].append(scalars[:, i])
    psrf_table = {
        name: (psrf(np.vstack(cols), use_second_half=False) if len(cols[0]) >= 2 else None)
        for name, cols in traces.items()
    }
    summary = {
        "converged": all(c.converged for c in chains),
        "burn_in": chains[0].burn_in,
        "n_samples": int(sum(len(c.states) for c in chains)),
        "inclusion_probabilities": [float(v) for v in incl],
        "psrf": {k: (None if v is None else float(v)) for k, v in psrf_table.items()},
    }
    _dump_json(summary, out / "summary.json")
    return chains, summary


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    seed = _require_seed(cfg, args)
    out = Path(args.out or cfg.get("out", ""))
    if not str(out):
        raise UsageError("an output directory is required")
    data = _dataset_from_config(cfg)
    hyper = _hyper_from_config(cfg)
    config = _sampler_config(cfg, args, seed)
    _, summary = _fit_and_store(data, hyper, config, out)
    if not summary["converged"]:
        raise ConvergenceFailure("convergence not reached; partial chains flagged")
    return 0


def cmd_select_re(args) -> int:
    cfg = _load_config(args)
    seed = _require_seed(cfg, args)
    out = Path(args.out or cfg.get("out", ""))
    if not str(out):
        raise UsageError("an output directory is required")
    data = _dataset_from_config(cfg)
    if data.layout.n_factors > 6:
        raise UsageError("more than 6 random-effect factors: enumeration refused")
    hyper = _hyper_from_config(cfg)
    config = _sampler_config(cfg, args, seed)
    criterion = args.criterion or cfg.get("criterion", "biwaic")
    if criterion not in (*_CRITERIA, "icv"):
        raise UsageError(f"unknown criterion {criterion!r}")
    folds = args.folds or cfg.get("folds", 10)
    best, table = select_re_model(data, hyper, config, criterion=criterion, folds=folds)
    out.mkdir(parents=True, exist_ok=True)
    sign = -1.0 if criterion == "icv" else 1.0
    ordered = sorted(table, key=lambda row: (sign * row["value"], row["spec"].n_factors))
    with open(out / "re_scores.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["spec", "criterion", "value", "converged"])
        for row in ordered:
            label = "+".join(row["spec"].names) if row["spec"].names else "(none)"
            writer.writerow([label, row["criterion"], repr(row["value"]), row["converged"]])
    _dump_json(
        {
            "best": {"factors": list(best.included_factors), "names": list(best.names)},
            "criterion": criterion,
            "contributions": {
                "+".join(row["spec"].names) or "(none)": [
                    float(v) for v in row["score"].contributions
                ]
                for row in table
            },
        },
        out / "selection.json",
    )
    for row in ordered:
        label = "+".join(row["spec"].names) if row["spec"].names else "(none)"
        print(f"{label}\t{row['value']:.4f}\t{'ok' if row['converged'] else 'NOT CONVERGED'}")
    print(f"best: {'+'.join(best.names) or '(none)'}")
    return 0


def _read_chain_dir(path: Path):
    files = sorted(path.glob("chain_*.csv"))
    if not files:
        raise UsageError(f"no chain files under {path}")
    return [read_chain(f) for f in files]


def cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    chains_dir = Path(args.chains or cfg.get("chains", ""))
    if not chains_dir.exists():
        raise UsageError(f"chain directory {chains_dir} does not exist")
    out = Path(args.out or cfg.get("out", str(chains_dir)))
    chains = _read_chain_dir(chains_dir)
    incl = inclusion_probabilities(chains)
    report = {
        "inclusion_probabilities": [float(v) for v in incl],
        "converged": all(c.converged for c in chains),
        "burn_in": chains[0].burn_in,
    }
    stacked = [c.stacked() for c in chains]
    psrf_table = {}
    for key in ("w0", "mu_w", "pi", "sigma_y2", "sigma_eps2", "sigma_w2"):
        traces = np.vstack([s[key] for s in stacked])
        psrf_table[key] = float(psrf(traces, use_second_half=False))
    report["psrf"] = psrf_table

    truth_path = args.truth or cfg.get("truth")
    if truth_path:
        with open(truth_path, encoding="utf-8") as fh:
            truth = np.asarray(json.load(fh)["gamma"], dtype=np.int8)
        pi_hat = float(np.mean(np.concatenate([s["pi"] for s in stacked])))
        rule = args.rule or cfg.get("rule", "fixed_threshold")
        if rule == "fixed_threshold":
            selected = classify(incl, "fixed_threshold", threshold=args.threshold or 0.5)
            thresholds = {"rule": rule, "threshold": args.threshold or 0.5}
        else:
            selected = classify(incl, "top_pi_hat", pi_hat=pi_hat)
            thresholds = {"rule": rule, "pi_hat": pi_hat}
        metrics = confusion_metrics(selected, truth)
        metrics.auroc = auroc(incl, truth)
        metrics.thresholds = thresholds
        report["metrics"] = {
            "auroc": metrics.auroc,
            "sensitivity": metrics.sensitivity,
            "specificity": metrics.specificity,
            "precision": metrics.precision,
            "f1": metrics.f1,
            "selected": [int(v) for v in metrics.selected],
            "thresholds": thresholds,
        }
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(report, out / "diagnose.json")
    with open(out / "inclusion.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "inclusion_probability"])
        for j, v in enumerate(incl):
            writer.writerow([j, repr(float(v))])
    return 0


def cmd_shard_fit(args) -> int:
    cfg = _load_config(args)
    seed = _require_seed(cfg, args)
    out = Path(args.out or cfg.get("out", ""))
    if not str(out):
        raise UsageError("an output directory is required")
    data = _dataset_from_config(cfg)
    hyper = _hyper_from_config(cfg)
    config = _sampler_config(cfg, args, seed)
    n_shards = args.shards or cfg.get("shards")
    if not n_shards:
        raise UsageError("--shards is required")

    correction_info = {"corrected": False}
    if args.correct_priors or cfg.get("correct_priors"):
        spec = PriorFamilySpec.from_hyperparameters(hyper, data.layout.n_factors)
        result = prior_correct(spec, n_shards, seed=seed)
        hyper = result.psi_tilde.to_hyperparameters(data.layout.n_factors)
        correction_info = {
            "corrected": True,
            "rounds": result.rounds,
            "nominal": {
                name: {"family": comp.family, "params": list(comp.params)}
                for name, comp in result.psi_tilde.components.items()
            },
            "fitted": {
                name: {"family": comp.family, "params": list(comp.params)}
                for name, comp in result.psi.components.items()
            },
        }

    plan, all_chains = shard_fit(data, hyper, config, n_shards)
    for s, chains in enumerate(all_chains):
        for store in chains:
            write_chain(store, config, out / "shards" / str(s))
    _dump_json(
        {
            "n_shards": plan.n_shards,
            "assignment": [int(v) for v in plan.assignment],
            "seed": plan.seed,
            "correction": correction_info,
        },
        out / "shard_plan.json",
    )
    return 0


def _roc_points(scores: np.ndarray, truth: np.ndarray):
    order = np.argsort(-scores, kind="stable")
    pos = truth[order] != 0
    tp = np.concatenate([[0], np.cumsum(pos)])
    fp = np.concatenate([[0], np.cumsum(~pos)])
    return tp / max(tp[-1], 1), fp / max(fp[-1], 1)


def cmd_combine(args) -> int:
    cfg = _load_config(args)
    shards_dir = Path(args.shards_dir or cfg.get("shards_dir", ""))
    if not (shards_dir / "shards").exists():
        raise UsageError(f"no shards under {shards_dir}")
    out = Path(args.out or cfg.get("out", str(shards_dir)))
    shard_dirs = sorted((shards_dir / "shards").iterdir(), key=lambda p: int(p.name))
    shard_chains = [_read_chain_dir(d) for d in shard_dirs]
    combined = combine_subposteriors(shard_chains)
    payload = {
        "inclusion_probabilities": [
            None if np.isnan(v) else float(v) for v in combined.inclusion
        ],
        "conflicts": combined.conflicts,
        "gaussian": {k: [float(m), float(v)] for k, (m, v) in combined.gaussian.items()},
    }
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(payload, out / "combined.json")

    full_dir = args.full_chains or cfg.get("full_chains")
    truth_path = args.truth or cfg.get("truth")
    if full_dir and truth_path:
        full = inclusion_probabilities(_read_chain_dir(Path(full_dir)))
        with open(truth_path, encoding="utf-8") as fh:
            truth = np.asarray(json.load(fh)["gamma"], dtype=np.int8)
        with open(out / "roc_compare.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source", "tpr", "fpr"])
            for label, scores in (("combined", combined.inclusion), ("full", full)):
                tpr, fpr = _roc_points(np.nan_to_num(scores, nan=0.5), truth)
                for t, f in zip(tpr, fpr):
                    writer.writerow([label, repr(float(t)), repr(float(f))])
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esabre")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config; flags override its fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--jobs", type=int)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--scenario", help="sd1|sd2|sd3|basic|fmdv|mismatch")
    p.add_argument("--n-strains", dest="n_strains", type=int)
    p.add_argument("--n-obs", dest="n_obs", type=int)
    p.add_argument("--n-variables", dest="n_variables", type=int)
    p.add_argument("--n-factors", dest="n_factors", type=int)
    p.add_argument("--sigma-y2", dest="sigma_y2", type=float)
    p.add_argument("--sigma-eps2", dest="sigma_eps2", type=float)
    p.add_argument("--mu-w", dest="mu_w", type=float)
    p.add_argument("--correlated", action="store_true")

    for name in ("fit", "select-re", "shard-fit"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--mode", choices=["esabre", "sabre_flat"])
        p.add_argument("--n-chains", dest="n_chains", type=int)
        p.add_argument("--max-iterations", dest="max_iterations", type=int)
        p.add_argument("--thin", type=int)
        p.add_argument("--block-size", dest="block_size", type=int)
        if name == "select-re":
            p.add_argument("--criterion", choices=["biwaic", "nwaic", "waic", "icv"])
            p.add_argument("--folds", type=int)
        if name == "shard-fit":
            p.add_argument("--shards", type=int)
            p.add_argument("--correct-priors", action="store_true")

    p = sub.add_parser("diagnose")
    common(p)
    p.add_argument("--chains")
    p.add_argument("--truth")
    p.add_argument("--rule", choices=["fixed_threshold", "top_pi_hat"])
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("combine")
    common(p)
    p.add_argument("--shards-dir", dest="shards_dir")
    p.add_argument("--full-chains", dest="full_chains")
    p.add_argument("--truth")
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select-re": cmd_select_re,
    "diagnose": cmd_diagnose,
    "shard-fit": cmd_shard_fit,
    "combine": cmd_combine,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConvergenceFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (UsageError, DataError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
