import numpy as np
import pytest

from tilestream.errors import PlanError, ShapeError
from tilestream.network import Conv, Dense, Flatten, MaxPool, NetworkSpec, Relu
from tilestream.planner import build_tile_plan

GRIDS = [(1, 1), (2, 2), (2, 4), (4, 4)]


def sample_streaming_config(rng, min_size=16, max_size=64):
    """One feasible (net, image_size, grid, plan) from the acceptance distribution:
    layers from {conv k in {1,2,3,5}, s in {1,2}; maxpool k=s=2; relu}, square
    images 16..64, grids 1x1 / 2x2 / 2x4 / 4x4. Resamples until the grid fits."""
    while True:
        layers = []
        for _ in range(int(rng.integers(1, 5))):
            kind = int(rng.integers(0, 6))
            if kind <= 2:
                k = int(rng.choice([1, 2, 3, 5]))
                s = int(rng.choice([1, 2]))
                p = int(rng.integers(0, min(k, 2)))
                layers.append(Conv(int(rng.integers(1, 4)), k, s, p))
            elif kind <= 4:
                layers.append(MaxPool(2, 2))
            else:
                layers.append(Relu())
        z = int(rng.integers(min_size, max_size + 1))
        grid = GRIDS[int(rng.integers(0, len(GRIDS)))]
        try:
            net = NetworkSpec(1, tuple(layers) + (Flatten(), Dense(1)), len(layers))
            plan = build_tile_plan(net, z, grid)
        except (PlanError, ShapeError):
            continue
        return net, z, grid, plan


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
