"""Dense-encoder multi-step forecaster for melt-pool temperature and depth.

One forward pass maps w past targets plus w+p known covariates to the full
p-step horizon of quantile forecasts (no recursive rollout).  Structure:

  1. a shared residual block projects every covariate vector to a small
     feature space;
  2. flattened past targets and projected covariates feed a dense encoder /
     decoder stack;
  3. a per-step temporal decoder combines each horizon step's decoded vector
     with that step's projected covariate;
  4. a global linear skip maps the flattened past targets onto the horizon.

The model runs on the in-house reverse-mode engine (`autodiff`), which is
what lets the MPC differentiate the forecast with respect to the future
power sequence.  Inputs are normalized with stored per-channel statistics
and the outputs de-normalized, so the public interface speaks physical
units throughout.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import artifacts, autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, TrainingAbortError

TEMP_CHANNEL = 0
DEPTH_CHANNEL = 1


@dataclass(frozen=True)
class TideConfig:
    window: int
    horizon: int
    num_targets: int = 2
    covariate_dim: int = 4
    num_encoder_layers: int = 1
    num_decoder_layers: int = 1
    decoder_output_dim: int = 16
    hidden_size: int = 128
    decoder_hidden_size: int = 32
    feature_projection_dim: int = 4
    dropout: float = 0.2
    layer_norm: bool = True
    quantiles: tuple = (0.1, 0.5, 0.9)

    def __post_init__(self):
        for name in ("window", "horizon", "num_targets", "covariate_dim",
                     "num_encoder_layers", "num_decoder_layers", "decoder_output_dim",
                     "hidden_size", "decoder_hidden_size", "feature_projection_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        q = tuple(self.quantiles)
        if any(not 0.0 < v < 1.0 for v in q):
            raise ConfigError("quantiles must lie in (0, 1)")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ConfigError("quantiles must be strictly increasing")
        if 0.5 not in q:
            raise ConfigError("quantiles must include the median 0.5")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def median_index(self) -> int:
        return tuple(self.quantiles).index(0.5)


class ResidualBlock:
    """dense(in->hidden) + relu + dense(hidden->out) + dropout, linear skip,
    optional layer normalization of the sum."""

    def __init__(self, name: str, in_dim: int, out_dim: int, hidden: int,
                 dropout: float, layer_norm: bool, params: Dict[str, Tensor],
                 rng: np.random.Generator):
        self.name = name
        self.dropout = dropout
        self.use_ln = layer_norm
        self.params = params

        def glorot(shape):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        params[f"{name}.W1"] = glorot((in_dim, hidden))
        params[f"{name}.b1"] = Tensor(np.zeros(hidden), requires_grad=True)
        params[f"{name}.W2"] = glorot((hidden, out_dim))
        params[f"{name}.b2"] = Tensor(np.zeros(out_dim), requires_grad=True)
        params[f"{name}.Wskip"] = glorot((in_dim, out_dim))
        params[f"{name}.bskip"] = Tensor(np.zeros(out_dim), requires_grad=True)
        if layer_norm:
            params[f"{name}.ln_gamma"] = Tensor(np.ones(out_dim), requires_grad=True)
            params[f"{name}.ln_beta"] = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
        p = self.params
        h = (x @ p[f"{self.name}.W1"] + p[f"{self.name}.b1"]).relu()
        h = h @ p[f"{self.name}.W2"] + p[f"{self.name}.b2"]
        if training and self.dropout > 0.0:
            keep = rng.random(h.shape) >= self.dropout
            h = h * Tensor(keep / (1.0 - self.dropout))
        out = h + (x @ p[f"{self.name}.Wskip"] + p[f"{self.name}.bskip"])
        if self.use_ln:
            out = ad.layer_norm(out, p[f"{self.name}.ln_gamma"], p[f"{self.name}.ln_beta"])
        return out


class TideModel:
    def __init__(self, config: TideConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params: Dict[str, Tensor] = {}
        self.metadata: dict = {}
        rng = np.random.default_rng(seed)
        c = config
        w, p = c.window, c.horizon
        ct, cc, f = c.num_targets, c.covariate_dim, c.feature_projection_dim
        nq = len(c.quantiles)

        self.projection = ResidualBlock(
            "proj", cc, f, c.hidden_size, c.dropout, c.layer_norm, self.params, rng)

        enc_in = w * ct + (w + p) * f
        self.encoders: List[ResidualBlock] = []
        dims = [enc_in] + [c.hidden_size] * c.num_encoder_layers
        for i in range(c.num_encoder_layers):
            self.encoders.append(ResidualBlock(
                f"enc{i}", dims[i], dims[i + 1], c.hidden_size,
                c.dropout, c.layer_norm, self.params, rng))

        self.decoders: List[ResidualBlock] = []
        for i in range(c.num_decoder_layers - 1):
            self.decoders.append(ResidualBlock(
                f"dec{i}", c.hidden_size, c.hidden_size, c.hidden_size,
                c.dropout, c.layer_norm, self.params, rng))
        self.decoders.append(ResidualBlock(
            f"dec{c.num_decoder_layers - 1}", c.hidden_size, p * c.decoder_output_dim,
            c.hidden_size, c.dropout, c.layer_norm, self.params, rng))

        self.temporal = ResidualBlock(
            "temporal", c.decoder_output_dim + f, ct * nq, c.decoder_hidden_size,
            c.dropout, c.layer_norm, self.params, rng)

        bound = np.sqrt(6.0 / (w * ct + p * ct * nq))
        self.params["skip.W"] = Tensor(
            rng.uniform(-bound, bound, size=(w * ct, p * ct * nq)), requires_grad=True)
        self.params["skip.b"] = Tensor(np.zeros(p * ct * nq), requires_grad=True)

        # per-channel normalization; identity until fitted on a training split
        self.target_mean = np.zeros(ct)
        self.target_std = np.ones(ct)
        self.cov_mean = np.zeros(cc)
        self.cov_std = np.ones(cc)

    # ------------------------------------------------------------------
    def set_normalization(self, target_mean, target_std, cov_mean, cov_std) -> None:
        c = self.config
        self.target_mean = np.asarray(target_mean, dtype=float).reshape(c.num_targets)
        self.target_std = np.asarray(target_std, dtype=float).reshape(c.num_targets)
        self.cov_mean = np.asarray(cov_mean, dtype=float).reshape(c.covariate_dim)
        self.cov_std = np.asarray(cov_std, dtype=float).reshape(c.covariate_dim)
        if np.any(self.target_std <= 0) or np.any(self.cov_std <= 0):
            raise ConfigError("normalization stds must be positive")

    def fit_normalization(self, targets: np.ndarray, covariates: np.ndarray) -> None:
        """Compute per-channel stats from stacked (N, ..., channel) arrays.
        Constant channels get unit scale."""
        t = targets.reshape(-1, self.config.num_targets)
        cv = covariates.reshape(-1, self.config.covariate_dim)
        t_std = t.std(axis=0)
        c_std = cv.std(axis=0)
        self.set_normalization(
            t.mean(axis=0), np.where(t_std > 1e-12, t_std, 1.0),
            cv.mean(axis=0), np.where(c_std > 1e-12, c_std, 1.0))

    @contextmanager
    def frozen(self):
        """Temporarily stop tracking weight gradients (inference/MPC use)."""
        flags = {k: t.requires_grad for k, t in self.params.items()}
        for t in self.params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for k, t in self.params.items():
                t.requires_grad = flags[k]

    # ------------------------------------------------------------------
    def _check(self, name, value, shape):
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        if data.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError(f"{name}: non-finite input")

    def forward(self, past_targets, past_covariates, future_covariates,
                training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Quantile forecast of shape (batch, horizon, targets, quantiles).

        Inputs may be numpy arrays or engine tensors (the MPC passes the
        future power channel as a tensor to obtain gradients).
        """
        c = self.config
        w, p = c.window, c.horizon
        past_targets = ad.as_tensor(past_targets)
        past_covariates = ad.as_tensor(past_covariates)
        future_covariates = ad.as_tensor(future_covariates)
        b = past_targets.shape[0]
        self._check("past_targets", past_targets, (b, w, c.num_targets))
        self._check("past_covariates", past_covariates, (b, w, c.covariate_dim))
        self._check("future_covariates", future_covariates, (b, p, c.covariate_dim))
        if training and c.dropout > 0.0 and rng is None:
            raise ValueError("training forward needs an rng for dropout")

        tm = self.target_mean.reshape(1, 1, -1)
        ts = self.target_std.reshape(1, 1, -1)
        cm = self.cov_mean.reshape(1, 1, -1)
        cs = self.cov_std.reshape(1, 1, -1)
        t_norm = (past_targets - tm) * (1.0 / ts)
        cov = ad.concat([(past_covariates - cm) * (1.0 / cs),
                         (future_covariates - cm) * (1.0 / cs)], axis=1)

        proj = self.projection(
            cov.reshape(b * (w + p), c.covariate_dim), training, rng
        ).reshape(b, w + p, c.feature_projection_dim)

        flat_targets = t_norm.reshape(b, w * c.num_targets)
        x = ad.concat([flat_targets,
                       proj.reshape(b, (w + p) * c.feature_projection_dim)], axis=1)
        for block in self.encoders:
            x = block(x, training, rng)
        for block in self.decoders:
            x = block(x, training, rng)
        decoded = x.reshape(b, p, c.decoder_output_dim)

        td_in = ad.concat([decoded, proj[:, w:, :]], axis=2)
        nq = len(c.quantiles)
        out = self.temporal(
            td_in.reshape(b * p, c.decoder_output_dim + c.feature_projection_dim),
            training, rng,
        ).reshape(b, p, c.num_targets, nq)

        skip = (flat_targets @ self.params["skip.W"] + self.params["skip.b"])
        out = out + skip.reshape(b, p, c.num_targets, nq)

        return out * ts.reshape(1, 1, -1, 1) + tm.reshape(1, 1, -1, 1)

    def predict_median(self, past_targets, past_covariates, future_covariates) -> np.ndarray:
        """Point forecast: the 0.5-quantile slice, dropout disabled."""
        single = np.asarray(past_targets).ndim == 2
        if single:
            past_targets = np.asarray(past_targets)[None]
            past_covariates = np.asarray(past_covariates)[None]
            future_covariates = np.asarray(future_covariates)[None]
        with self.frozen():
            out = self.forward(past_targets, past_covariates, future_covariates)
        med = out.data[:, :, :, self.config.median_index]
        return med[0] if single else med

    # ------------------------------------------------------------------
    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {k: t.data.copy() for k, t in self.params.items()}
        arrays["norm.target_mean"] = self.target_mean.copy()
        arrays["norm.target_std"] = self.target_std.copy()
        arrays["norm.cov_mean"] = self.cov_mean.copy()
        arrays["norm.cov_std"] = self.cov_std.copy()
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in arrays:
                raise ConfigError(f"missing weight array: {k}")
            if arrays[k].shape != t.data.shape:
                raise ConfigError(f"shape mismatch for {k}")
            t.data = arrays[k].astype(float).copy()
        self.target_mean = arrays["norm.target_mean"].astype(float).copy()
        self.target_std = arrays["norm.target_std"].astype(float).copy()
        self.cov_mean = arrays["norm.cov_mean"].astype(float).copy()
        self.cov_std = arrays["norm.cov_std"].astype(float).copy()


def quantile_loss(y_true, y_pred, quantiles) -> Tensor:
    """Mean pinball loss over samples, horizon, channels and quantile levels."""
    y_pred = ad.as_tensor(y_pred)
    y_true = np.asarray(y_true, dtype=float)
    if y_true.shape != y_pred.shape[:-1]:
        raise ValueError(f"y_true shape {y_true.shape} does not match forecast "
                         f"{y_pred.shape[:-1]}")
    q = np.asarray(quantiles, dtype=float).reshape((1,) * (y_pred.data.ndim - 1) + (-1,))
    err = Tensor(y_true[..., None]) - y_pred
    return ad.maximum(err * q, err * (q - 1.0)).mean()


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_decay: float = 0.95
    lr_decay_every: int = 2
    l2: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def train(model: TideModel, train_split, val_split, cfg: TrainConfig):
    """Adam with step-decayed learning rate; keeps the best-validation weights.

    The pinball loss is computed in normalized target units so both channels
    carry comparable weight; the L2 penalty covers every parameter.  Returns
    a per-epoch history of dicts (train_loss, val_loss, lr).
    """
    c = model.config
    rng = np.random.default_rng(cfg.seed)
    q = np.asarray(c.quantiles)

    model.fit_normalization(
        np.concatenate([train_split.past_targets.reshape(-1, c.num_targets),
                        train_split.future_targets.reshape(-1, c.num_targets)]),
        np.concatenate([train_split.past_covariates.reshape(-1, c.covariate_dim),
                        train_split.future_covariates.reshape(-1, c.covariate_dim)]))

    m_state = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    v_state = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    step = 0
    n = train_split.past_targets.shape[0]
    history = []
    best_val = np.inf
    best_weights = None
    tm = model.target_mean.reshape(1, 1, -1)
    ts = model.target_std.reshape(1, 1, -1)

    def normalized_pinball(split) -> float:
        with model.frozen():
            pred = model.forward(split.past_targets, split.past_covariates,
                                 split.future_covariates)
        pred_n = (pred.data - tm[..., None]) / ts[..., None]
        true_n = (split.future_targets - tm) / ts
        err = true_n[..., None] - pred_n
        qq = q.reshape(1, 1, 1, -1)
        return float(np.maximum(err * qq, err * (qq - 1.0)).mean())

    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for bstart in range(0, n, cfg.batch_size):
            idx = order[bstart:bstart + cfg.batch_size]
            batch_no = bstart // cfg.batch_size
            pred = model.forward(train_split.past_targets[idx],
                                 train_split.past_covariates[idx],
                                 train_split.future_covariates[idx],
                                 training=True, rng=rng)
            pred_n = (pred - Tensor(tm[..., None])) * Tensor(1.0 / ts[..., None])
            true_n = (train_split.future_targets[idx] - tm) / ts
            loss = quantile_loss(true_n, pred_n, q)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingAbortError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            loss.backward()

            step += 1
            bc1 = 1.0 - cfg.adam_beta1 ** step
            bc2 = 1.0 - cfg.adam_beta2 ** step
            l2_value = 0.0
            for k, t in model.params.items():
                g = t.grad if t.grad is not None else np.zeros_like(t.data)
                if cfg.l2 > 0.0:
                    l2_value += float((t.data ** 2).sum())
                    g = g + 2.0 * cfg.l2 * t.data
                m_state[k] = cfg.adam_beta1 * m_state[k] + (1 - cfg.adam_beta1) * g
                v_state[k] = cfg.adam_beta2 * v_state[k] + (1 - cfg.adam_beta2) * g * g
                t.data = t.data - lr * (m_state[k] / bc1) / (np.sqrt(v_state[k] / bc2) + cfg.adam_eps)
                t.grad = None
            epoch_loss += (loss_value + cfg.l2 * l2_value) * len(idx)

        val_loss = normalized_pinball(val_split) if val_split is not None else np.nan
        history.append({"epoch": epoch, "train_loss": epoch_loss / n,
                        "val_loss": val_loss, "lr": lr})
        if val_split is not None and val_loss < best_val:
            best_val = val_loss
            best_weights = {k: t.data.copy() for k, t in model.params.items()}

    if best_weights is not None:
        for k, t in model.params.items():
            t.data = best_weights[k]
    model.metadata["best_val_loss"] = None if not np.isfinite(best_val) else best_val
    model.metadata["epochs"] = cfg.epochs
    return history


# ----------------------------------------------------------------------
# persistence: binary weights + JSON sidecar
MODEL_FORMAT_VERSION = 1
WEIGHTS_FILE = "model.bin"
SIDECAR_FILE = "model.json"


def save_model(model: TideModel, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    artifacts.write_tensors(os.path.join(out_dir, WEIGHTS_FILE), model.state_arrays())
    c = model.config
    sidecar = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": {
            "window": c.window, "horizon": c.horizon,
            "num_targets": c.num_targets, "covariate_dim": c.covariate_dim,
            "num_encoder_layers": c.num_encoder_layers,
            "num_decoder_layers": c.num_decoder_layers,
            "decoder_output_dim": c.decoder_output_dim,
            "hidden_size": c.hidden_size,
            "decoder_hidden_size": c.decoder_hidden_size,
            "feature_projection_dim": c.feature_projection_dim,
            "dropout": c.dropout, "layer_norm": c.layer_norm,
            "quantiles": list(c.quantiles),
        },
        "seed": model.seed,
        "normalization": {
            "target_mean": model.target_mean.tolist(),
            "target_std": model.target_std.tolist(),
            "cov_mean": model.cov_mean.tolist(),
            "cov_std": model.cov_std.tolist(),
        },
        "metadata": model.metadata,
    }
    artifacts.write_manifest(os.path.join(out_dir, SIDECAR_FILE), sidecar)


def load_model(model_dir) -> TideModel:
    sidecar = artifacts.read_manifest(os.path.join(model_dir, SIDECAR_FILE))
    if sidecar.get("format_version") != MODEL_FORMAT_VERSION:
        raise ConfigError(f"unsupported model format: {sidecar.get('format_version')}")
    raw = dict(sidecar["config"])
    raw["quantiles"] = tuple(raw["quantiles"])
    config = TideConfig(**raw)
    model = TideModel(config, seed=sidecar.get("seed", 0))
    model.load_state_arrays(artifacts.read_tensors(os.path.join(model_dir, WEIGHTS_FILE)))
    model.metadata = dict(sidecar.get("metadata", {}))
    return model
