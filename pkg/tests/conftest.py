import numpy as np
import pytest

from socialstep import crowdsets, planner, synthetic
from socialstep.stl import SafetyParams


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """Five synthetic scenes in the plain-text format, written once."""
    outdir = tmp_path_factory.mktemp("scenes")
    synthetic.write_synthetic_dataset(outdir, seed=0)
    return outdir


@pytest.fixture(scope="session")
def scenes(dataset_dir):
    return [crowdsets.load_scene(dataset_dir / f"{name}.txt")
            for name in synthetic.SCENE_NAMES]


@pytest.fixture(scope="session")
def zara1_scene(scenes):
    return next(s for s in scenes if s.name == "zara1")


@pytest.fixture(scope="session")
def split(scenes):
    return crowdsets.leave_one_out(scenes, "zara1")


@pytest.fixture(scope="session")
def quick_model(split):
    """A briefly trained default-architecture planner (for harness tests)."""
    train_samples, _ = split
    cfg = planner.PlannerConfig(
        safety=SafetyParams(alpha1=1.0, alpha2=1.0), epochs=4, seed=5)
    model = planner.PlannerModel(cfg)
    planner.train(model, train_samples[:800])
    return model
