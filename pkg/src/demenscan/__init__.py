"""CNN dementia-stage classifier on MRI slices, with filter, feature-map and
guided-backprop explanations."""

from .data import CLASS_NAMES, DatasetIndex, Sample, decode_image, scan_dataset, \
    stratified_kfold, stratified_split
from .model import ModelSpec, checkpoint_load, checkpoint_save, init_parameters, model_forward
from .training import TrainConfig, evaluate, kfold_run, train

__version__ = "0.1.0"
