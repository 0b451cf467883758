"""Type-1-diabetes digital twin: simulator, amortized inference, baselines."""

__version__ = "0.1.0"

from .physiology import (  # noqa: F401
    PhysioParams,
    PopulationConstants,
    SensorModel,
    Trajectory,
    integrate,
    steady_state,
)
from .scenario import Scenario, canonical_scenario  # noqa: F401
from .datagen import Dataset, PriorSpec, default_prior, generate_dataset  # noqa: F401
from .flow import FlowModel, TrainConfig  # noqa: F401
from .npe import PosteriorModel, PosteriorSamples, infer, train_npe  # noqa: F401
