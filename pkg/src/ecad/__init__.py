"""Entire-space cascade delayed-feedback modeling for effective conversion rate prediction.

Simulator, label attribution, a shared-bottom multi-tower model zoo and the
evaluation harness, all in numpy.
"""

from .attribution import Window, WindowConfig, attribute, attribute_log
from .config import ExperimentConfig, load_config, parse_config, replication_preset
from .errors import ConfigError, DataError, EcadError, StageError, UndefinedMetricError, UnsupportedTaskError
from .metrics import auc, calibration, paired_ttest, pr_auc, ri_metric
from .models import TASKS, VARIANTS, NetConfig, TrainConfig, build, predict, train
from .pipeline import replicate
from .simulator import ClickEvent, EventLog, GroundTruth, SimConfig, build_ground_truth, simulate

__version__ = "0.1.0"
