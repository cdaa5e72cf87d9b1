"""Bidirectional semantic-guided domain adaptation on a numpy autodiff core."""

from .autodiff import Tensor, backward, default_dtype, finite_diff_check, no_grad
from .data import DatasetManifest, gen_scene, read_dataset, render_domain, write_dataset
from .metrics import ConfusionMatrix, frechet_distance, inception_score, miou
from .models import (Encoder, Generator, ModelBundle, MultiScaleDiscriminator, SegDiscriminator,
                     SegNet, translate)
from .training import (Adam, LrSchedule, SegmentationTrainer, ToyData, TrainConfig,
                       TranslationTrainer, adam_step, bidirectional_loop,
                       generate_pseudo_labels, poly_lr)

__version__ = "0.1.0"
