"""SSFMamba: a dual-branch spatial/frequency 3D segmentation network built on
selective state-space scans, implemented over numpy with a small reverse-mode
autodiff engine."""
from .network import (ABLATIONS, Checkpoint, Model, ModelConfig, ablation_config, build_model,
                      cross_entropy_loss, load_checkpoint, save_checkpoint)
from .train import MetricsReport, TrainConfig, TrainingError, evaluate

__version__ = "0.1.0"
