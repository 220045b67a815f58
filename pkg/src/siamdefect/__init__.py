"""Change-aware Siamese segmentation for display defect detection."""
from .config import Config, ConfigError, LossConfig, ModelConfig, TrainConfig, load_config, validate_config
from .model import ChangeAwareSiameseNet, ModelOutput

__version__ = "0.1.0"
