import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from planforge.config import load_config  # noqa: E402
from planforge.phantom import BeamConfig, GridSpec, StructureSet, generate_case  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
TINY_CONFIG = ROOT / "configs" / "tiny.json"
DEFAULT_CONFIG = ROOT / "configs" / "default.json"


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_case():
    return generate_case(3, GridSpec(32, 32), "tiny", BeamConfig(beamlets_per_field=16))


@pytest.fixture(scope="session")
def hnc_case():
    return generate_case(11)


def toy_structures(ny=6, nx=6) -> StructureSet:
    masks = np.zeros((2, ny, nx), bool)
    masks[0, 1:4, 1:4] = True
    masks[1, 4:, :] = True
    return StructureSet(("CTV", "SpinalCord"), masks)
