"""Open-loop data generation: excitation profiles -> training dataset.

Each Latin-hypercube profile drives one full open-loop print; the sampled
feature/covariate series are windowed per run (no windows spanning two
profiles), pooled, shuffled and split.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict

import numpy as np

from . import loop
from .config import WorkbenchConfig, build_profile_bounds, config_to_dict
from .dataset import SplitArrays, save_dataset, segment, shuffle_and_split
from .errors import RunAbortedError
from .profiles import lhs_sample


def profile_noise_seed(cfg: WorkbenchConfig, profile_index: int) -> int:
    return cfg.datagen.seed + 7919 * (profile_index + 1)


def simulate_profile(cfg: WorkbenchConfig, profile, profile_index: int = 0,
                     snapshot_dir=None) -> loop.RunLog:
    """One open-loop run with extraction at sampling instants."""
    run_cfg = copy.deepcopy(cfg)
    run_cfg.run.controller = "open_loop"
    return loop.run(run_cfg, profile=profile, snapshot_dir=snapshot_dir,
                    sampled_extraction=True,
                    noise_std=cfg.datagen.excitation_noise_std,
                    noise_seed=profile_noise_seed(cfg, profile_index))


def run_series(log: loop.RunLog):
    """(targets, covariates) arrays for segmentation from a run log."""
    targets = np.column_stack([log.column("raw_temp"), log.column("raw_depth")])
    covariates = np.column_stack([log.column("d_x"), log.column("d_y"),
                                  log.column("z"), log.column("u")])
    return targets, covariates


def build_dataset(cfg: WorkbenchConfig, out_dir: str) -> dict:
    """Simulate every profile, segment, shuffle, split and persist."""
    dg = cfg.datagen
    bounds = build_profile_bounds(cfg)
    profiles = lhs_sample(dg.n_profiles, bounds, seed=dg.seed, budget=dg.lhs_budget)
    os.makedirs(out_dir, exist_ok=True)

    per_run = []
    run_lengths = []
    for i, profile in enumerate(profiles):
        snap_dir = None
        if dg.save_snapshots:
            snap_dir = os.path.join(out_dir, f"snapshots_{i:03d}")
            os.makedirs(snap_dir, exist_ok=True)
        try:
            log = simulate_profile(cfg, profile, profile_index=i, snapshot_dir=snap_dir)
        except RunAbortedError as exc:
            raise RunAbortedError(f"profile {i} aborted: {exc}",
                                  partial_log=exc.partial_log) from exc
        targets, covariates = run_series(log)
        run_lengths.append(targets.shape[0])
        per_run.append(segment(targets, covariates, dg.window, dg.horizon))

    all_segments = SplitArrays.concatenate(per_run)
    rng = np.random.default_rng(dg.seed + 1)
    train_split, val_split = shuffle_and_split(all_segments, dg.val_fraction, rng)

    manifest = save_dataset(out_dir, train_split, val_split, {
        "config": config_to_dict(cfg),
        "profiles": [asdict(p) for p in profiles],
        "run_lengths": run_lengths,
        "seed": dg.seed,
    })
    return manifest
