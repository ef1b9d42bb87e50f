"""Self-supervised visual correspondence lab.

Trains a small backbone with affinity-based intra/inter-video transformation
objectives on synthetic videos and propagates masks or keypoints with a
mutual-correlation affinity at inference.
"""

from .affinity import (Affinity, BatchFeatures, FeatureMap, LabelMap,
                       SubAffinityPair, compute_affinity, compute_inter_affinity,
                       compute_mutual_affinity, mutual_weights,
                       renormalize_positive, transform_labels)
from .backbone import Backbone, BackboneConfig
from .codec import ColorCodec, EncodedFrame, LearnedCodec, make_codec
from .data import DatasetIndex, SyntheticSpec, generate_synthetic, index_dataset
from .evaluation import MetricReport, boundary_f, jaccard, miou, pck
from .losses import (CoordinateGrid, LossReport, LossSwitches, loss_concentration,
                     loss_cycle, loss_intra_inter, loss_self, loss_sparse, loss_total)
from .propagation import (PropagationConfig, knn_filter, knn_filter_row,
                          propagate_keypoints, propagate_masks, propagate_sequence)
from .tracker import PatchBox, TrackedPair, estimate_scale, random_crop, track_patch
from .trainer import TrainConfig, TrainState, build_batch, run_training, train_step

__version__ = "0.1.0"
