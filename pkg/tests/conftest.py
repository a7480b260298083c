import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    from collabsg.dataset import SimulationConfig, simulate_dataset

    out = tmp_path_factory.mktemp("ds") / "small"
    simulate_dataset(SimulationConfig(seed=2, agents=2, duration=30.0, world_preset="small", loop_blocks=1), out)
    return out
