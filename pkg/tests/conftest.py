import json
from pathlib import Path

import numpy as np
import pytest

from maya.data import FeatureInfo
from maya.model import ModelConfig, build

ORACLES = Path(__file__).parent / "oracles"


@pytest.fixture(scope="session")
def frozen():
    return json.loads((ORACLES / "frozen.json").read_text())


@pytest.fixture(scope="session")
def blocks_ref():
    return dict(np.load(ORACLES / "blocks.npz"))


def toy_config(**kw):
    base = dict(num_layers=2, hidden_size=16, num_heads=4, num_branch=3, num_decoder_layers=2,
                dropout=0.0, decoder_dropout=0.0, batch_size=4)
    base.update(kw)
    return ModelConfig(**base)


def toy_batch(task="regression", b=4, seed=0, n_num=2, cards=(3,)):
    rng = np.random.default_rng(seed)
    x_num = rng.normal(size=(b, n_num))
    x_cat = np.stack([rng.integers(0, c, size=b) for c in cards], axis=1) if cards else np.zeros((b, 0), int)
    if task == "regression":
        y = rng.normal(size=b)
        info = FeatureInfo(n_num, list(cards), task, 0)
    else:
        c = 2 if task == "binary" else 3
        y = rng.integers(0, c, size=b)
        info = FeatureInfo(n_num, list(cards), task, c)
    return info, x_num, x_cat, y


def toy_model(task="regression", seed=0, **kw):
    info, x_num, x_cat, y = toy_batch(task, seed=seed)
    return build(toy_config(**kw), info, seed), x_num, x_cat, y


def synthetic_dataset(directory, kind="classification", n=120, seed=0, split_seed=0):
    """Prepared ``EncodedDataset`` from one of the synthetic generators."""
    from maya import synthetic
    from maya.data import Schema, prepare

    if kind == "classification":
        x, y, _ = synthetic.linear_classification(n, seed=seed)
        csv_path, schema_path = synthetic.write_table(directory, x, y, "binary", 2)
    else:
        x, y = synthetic.linear_regression(n, seed=seed)
        csv_path, schema_path = synthetic.write_table(directory, x, y, "regression")
    return prepare(csv_path, Schema.read(schema_path), split_seed)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
