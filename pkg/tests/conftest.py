import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neuroadapt import dynamics, mlp, sim  # noqa: E402

SEED = 0
COUNT = 150


@dataclass
class ScenarioArtifacts:
    kind: str
    train: list
    test: list
    inputs: np.ndarray
    targets: np.ndarray
    model: mlp.MlpModel
    result: mlp.TrainResult
    train_seconds: float
    data: dict
    held_out_x: np.ndarray | None = None
    held_out_u: np.ndarray | None = None


def build_artifacts(kind: str, held_out: int = 0, **data_kwargs) -> ScenarioArtifacts:
    """Instances, nominal training data and a trained network for one scenario."""
    instances = dynamics.generate_instances(dynamics.nominal_instance(kind), COUNT, SEED)
    train = [s for s in instances if s.split == "train"]
    test = [s for s in instances if s.split == "test"]
    data = sim.generate_training_data(train, **data_kwargs)
    x, u = sim.training_arrays(data)
    start = time.perf_counter()
    model, result = mlp.train(x, u, mlp.TrainConfig(seed=SEED))
    seconds = time.perf_counter() - start
    art = ScenarioArtifacts(kind, train, test, x, u, model, result, seconds, data)
    if held_out:
        hx, hu = sim.training_arrays(sim.generate_training_data(test[:held_out], **data_kwargs))
        art.held_out_x, art.held_out_u = hx, hu
    return art


@pytest.fixture(scope="session")
def pendulum_artifacts():
    return build_artifacts("pendulum", held_out=5)


@pytest.fixture(scope="session")
def manipulator_artifacts():
    return build_artifacts("manipulator")


@pytest.fixture(scope="session")
def unicycle_artifacts():
    return build_artifacts("unicycle")
