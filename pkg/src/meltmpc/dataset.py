"""Moving-window segmentation of simulated runs into training windows.

A run is a pair of aligned series sampled at the controller rate: targets
(temperature, depth) and covariates (d_x, d_y, z, u).  Segmentation smooths
the targets causally, then slides a window of length w+p with unit stride;
the first w samples of each window are the history, the last p the horizon.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import artifacts
from .features import moving_average

TARGET_COLUMNS = ("x_temp", "x_depth")
COVARIATE_COLUMNS = ("d_x", "d_y", "z", "u")
SMOOTH_WINDOW = 4


@dataclass
class SplitArrays:
    """A stack of training windows (one row per segment)."""

    past_targets: np.ndarray        # (n, w, 2)
    past_covariates: np.ndarray     # (n, w, 4)
    future_covariates: np.ndarray   # (n, p, 4)
    future_targets: np.ndarray      # (n, p, 2)

    def __len__(self) -> int:
        return self.past_targets.shape[0]

    def subset(self, idx) -> "SplitArrays":
        return SplitArrays(self.past_targets[idx], self.past_covariates[idx],
                           self.future_covariates[idx], self.future_targets[idx])

    @staticmethod
    def concatenate(splits) -> "SplitArrays":
        return SplitArrays(
            np.concatenate([s.past_targets for s in splits]),
            np.concatenate([s.past_covariates for s in splits]),
            np.concatenate([s.future_covariates for s in splits]),
            np.concatenate([s.future_targets for s in splits]))


def segment(targets: np.ndarray, covariates: np.ndarray, w: int, p: int,
            smooth_window: int = SMOOTH_WINDOW) -> SplitArrays:
    """Slice one run into length-(w+p) windows with unit stride.

    Targets are smoothed over the full run before windowing.  Runs shorter
    than w+p yield an empty stack.
    """
    targets = np.asarray(targets, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    if targets.ndim != 2 or covariates.ndim != 2:
        raise ValueError("targets and covariates must be 2-D (time, channel)")
    if targets.shape[0] != covariates.shape[0]:
        raise ValueError("targets and covariates must have equal length")
    length = targets.shape[0]
    total = w + p
    n = max(length - total + 1, 0)
    ct, cc = targets.shape[1], covariates.shape[1]
    if n == 0:
        return SplitArrays(np.empty((0, w, ct)), np.empty((0, w, cc)),
                           np.empty((0, p, cc)), np.empty((0, p, ct)))
    smoothed = moving_average(targets, smooth_window)
    past_t = np.stack([smoothed[i:i + w] for i in range(n)])
    past_c = np.stack([covariates[i:i + w] for i in range(n)])
    fut_c = np.stack([covariates[i + w:i + total] for i in range(n)])
    fut_t = np.stack([smoothed[i + w:i + total] for i in range(n)])
    return SplitArrays(past_t, past_c, fut_c, fut_t)


def shuffle_and_split(all_segments: SplitArrays, val_fraction: float,
                      rng: np.random.Generator):
    """Shuffle segments and split train/validation (train share first)."""
    n = len(all_segments)
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    return all_segments.subset(train_idx), all_segments.subset(val_idx)


# ----------------------------------------------------------------------
TRAIN_FILE = "train.bin"
VAL_FILE = "val.bin"
MANIFEST_FILE = "manifest.json"


def _split_arrays_dict(split: SplitArrays) -> dict:
    return {
        "past_targets": split.past_targets,
        "past_covariates": split.past_covariates,
        "future_covariates": split.future_covariates,
        "future_targets": split.future_targets,
    }


def save_dataset(out_dir, train_split: SplitArrays, val_split: SplitArrays,
                 manifest_extra: dict) -> dict:
    """Write one binary per split plus a manifest with counts, shapes,
    per-channel stats and artifact hashes."""
    os.makedirs(out_dir, exist_ok=True)
    artifacts.write_tensors(os.path.join(out_dir, TRAIN_FILE), _split_arrays_dict(train_split))
    artifacts.write_tensors(os.path.join(out_dir, VAL_FILE), _split_arrays_dict(val_split))

    t = np.concatenate([train_split.past_targets.reshape(-1, train_split.past_targets.shape[-1]),
                        train_split.future_targets.reshape(-1, train_split.future_targets.shape[-1])])
    cv = np.concatenate([train_split.past_covariates.reshape(-1, train_split.past_covariates.shape[-1]),
                         train_split.future_covariates.reshape(-1, train_split.future_covariates.shape[-1])])
    manifest = {
        "kind": "dataset",
        "counts": {"train": len(train_split), "val": len(val_split)},
        "window": int(train_split.past_targets.shape[1]),
        "horizon": int(train_split.future_targets.shape[1]),
        "target_columns": list(TARGET_COLUMNS),
        "covariate_columns": list(COVARIATE_COLUMNS),
        "train_stats": {
            "target_mean": t.mean(axis=0).tolist() if len(t) else [],
            "target_std": t.std(axis=0).tolist() if len(t) else [],
            "covariate_mean": cv.mean(axis=0).tolist() if len(cv) else [],
            "covariate_std": cv.std(axis=0).tolist() if len(cv) else [],
        },
        "artifacts": {
            TRAIN_FILE: artifacts.sha256_file(os.path.join(out_dir, TRAIN_FILE)),
            VAL_FILE: artifacts.sha256_file(os.path.join(out_dir, VAL_FILE)),
        },
    }
    manifest.update(manifest_extra)
    artifacts.write_manifest(os.path.join(out_dir, MANIFEST_FILE), manifest)
    return manifest


def load_dataset(dataset_dir):
    """Read (train, val, manifest) written by :func:`save_dataset`."""
    manifest = artifacts.read_manifest(os.path.join(dataset_dir, MANIFEST_FILE))
    splits = []
    for fname in (TRAIN_FILE, VAL_FILE):
        arrays = artifacts.read_tensors(os.path.join(dataset_dir, fname))
        splits.append(SplitArrays(arrays["past_targets"], arrays["past_covariates"],
                                  arrays["future_covariates"], arrays["future_targets"]))
    return splits[0], splits[1], manifest
