"""Chain persistence in the interchange CSV/JSON formats.

One CSV row per stored iteration, shortest round-trip float formatting so
reloading reproduces every value bit-identically; a JSON sidecar records
seed, configuration, burn-in index and convergence flag.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import ModelState
from .sampler import ChainStore, SamplerConfig

__all__ = ["write_chain", "read_chain", "chain_columns"]


def chain_columns(n_factors: int, n_variables: int, n_coefficients: int, n_pairs: int):
    cols = ["iter", "w0", "mu_w", "pi", "sigma_y2", "sigma_eps2", "sigma_w2"]
    cols += [f"sigma_b2_{k}" for k in range(n_factors)]
    cols += [f"gamma_{j}" for j in range(n_variables)]
    cols += [f"w_{j}" for j in range(n_variables)]
    cols += [f"b_{i}" for i in range(n_coefficients)]
    cols += [f"mu_y_{p}" for p in range(n_pairs)]
    return cols


def write_chain(store: ChainStore, config: SamplerConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = out_dir / f"chain_{store.chain_index}"
    example = store.states[0] if store.states else None
    shapes = {
        "n_factors": int(example.sigma_b2.size) if example else 0,
        "n_variables": int(example.w.size) if example else 0,
        "n_coefficients": int(example.b.size) if example else 0,
        "n_pairs": int(example.mu_y.size) if example else 0,
    }
    with open(base.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(chain_columns(**shapes))
        for it, state in zip(store.iters, store.states):
            row = [it, repr(state.w0), repr(state.mu_w), repr(state.pi)]
            row += [repr(state.sigma_y2), repr(state.sigma_eps2), repr(state.sigma_w2)]
            row += [repr(float(v)) for v in state.sigma_b2]
            row += [str(int(g)) for g in state.gamma]
            row += [repr(float(v)) for v in state.w]
            row += [repr(float(v)) for v in state.b]
            row += [repr(float(v)) for v in state.mu_y]
            writer.writerow(row)
    sidecar = {
        "seed": store.seed,
        "chain_index": store.chain_index,
        "burn_in": store.burn_in,
        "converged": store.converged,
        "mode": store.mode,
        "config": asdict(config),
        **shapes,
    }
    with open(base.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return base.with_suffix(".csv")


def read_chain(csv_path: str | Path) -> ChainStore:
    csv_path = Path(csv_path)
    with open(csv_path.with_suffix(".json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    nk, nj = meta["n_factors"], meta["n_variables"]
    nb, npairs = meta["n_coefficients"], meta["n_pairs"]
    states, iters = [], []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = chain_columns(nk, nj, nb, npairs)
        if header != expected:
            raise ValueError(f"unexpected chain header in {csv_path}")
        for row in reader:
            vals = row
            iters.append(int(vals[0]))
            base = 7
            sigma_b2 = np.array([float(v) for v in vals[base : base + nk]])
            gamma = np.array([int(v) for v in vals[base + nk : base + nk + nj]], dtype=np.int8)
            w = np.array([float(v) for v in vals[base + nk + nj : base + nk + 2 * nj]])
            b = np.array(
                [float(v) for v in vals[base + nk + 2 * nj : base + nk + 2 * nj + nb]]
            )
            mu_y = np.array([float(v) for v in vals[base + nk + 2 * nj + nb :]])
            states.append(
                ModelState(
                    mu_y=mu_y,
                    w0=float(vals[1]),
                    w=w,
                    gamma=gamma,
                    mu_w=float(vals[2]),
                    sigma_y2=float(vals[4]),
                    sigma_eps2=float(vals[5]),
                    sigma_w2=float(vals[6]),
                    b=b,
                    sigma_b2=sigma_b2,
                    pi=float(vals[3]),
                )
            )
    return ChainStore(
        states=states,
        iters=iters,
        burn_in=meta["burn_in"],
        converged=meta["converged"],
        seed=meta["seed"],
        chain_index=meta["chain_index"],
        mode=meta["mode"],
    )
