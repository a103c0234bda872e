import numpy as np
import pytest

from wxadapt import weathersim as ws


@pytest.fixture(scope="session")
def tiny_haze_dataset(tmp_path_factory):
    """Shared 10/10/4 haze dataset for trainer and CLI tests."""
    root = tmp_path_factory.mktemp("tiny_haze")
    cfg = ws.SynthConfig(out_dir=str(root / "data"), weather="haze",
                         n_source=10, n_target=10, n_val=4, seed=77)
    manifest = ws.synthesize_dataset(cfg)
    return manifest


@pytest.fixture(scope="session")
def tiny_rain_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_rain")
    cfg = ws.SynthConfig(out_dir=str(root / "data"), weather="rain",
                         n_source=6, n_target=6, n_val=3, seed=78)
    manifest = ws.synthesize_dataset(cfg)
    return manifest
