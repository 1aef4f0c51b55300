import copy

import pytest

from meltmpc.config import WorkbenchConfig, load_config


def tiny_config() -> WorkbenchConfig:
    """Small geometry for fast integration tests: 4 mm square, 2 layers."""
    cfg = load_config()
    cfg.path.side_length = 4.0
    cfg.path.num_layers = 2
    cfg.path.interlayer_dwell = 0.5
    cfg.plant.substrate_height = 2.0
    cfg.plant.margin = 1.5
    cfg.datagen.window = 6
    cfg.datagen.horizon = 6
    cfg.datagen.n_profiles = 2
    cfg.datagen.lhs_budget = 4
    cfg.train.epochs = 3
    cfg.train.batch_size = 32
    cfg.train.tide.hidden_size = 16
    cfg.train.tide.decoder_output_dim = 4
    cfg.train.tide.decoder_hidden_size = 8
    cfg.train.tide.feature_projection_dim = 3
    cfg.mpc.constraint_activation_layer = 2
    cfg.mpc.corner_threshold = 1.0
    cfg.run.reference.knots = [[0.0, 1250.0], [1.4, 1320.0], [2.6, 1270.0]]
    return cfg


@pytest.fixture
def tiny_cfg() -> WorkbenchConfig:
    return tiny_config()


def clone(cfg: WorkbenchConfig) -> WorkbenchConfig:
    return copy.deepcopy(cfg)
