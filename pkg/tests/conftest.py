import os
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

CACHE = Path(os.environ.get("ADVSCENE_MODEL_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "models"))


@pytest.fixture(scope="session")
def toy_models():
    """Codec + denoiser trained on the default synthetic mixture (cached on disk)."""
    from advscene.toymodels import cached_toy_models
    return cached_toy_models(CACHE)


@pytest.fixture(scope="session")
def straight_scenes():
    from advscene.synth import synth_scenarios
    return synth_scenarios(5, 6, "straight")
