"""Personalized federated learning for weakly-supervised segmentation,
exercised end to end on deterministic synthetic multi-site data."""

from .engine import DiffTensor, Tape
from .federation import (AblationFlags, AdamW, FederationState, Mode, SiteData,
                         TrainConfig, adaptive_aggregate, clip_weights,
                         local_train, run_federation, run_round,
                         update_weight_matrix, weighted_average)
from .losses import (GatedCrfConfig, LossWeights, SparseLabelMap, UNLABELED,
                     gated_crf, local_objective, partial_ce, seg_loss)
from .metrics import dsc, hd95
from .segnet import (ForwardOutput, ModelParams, SiteEncoding, UNetConfig,
                     build_model, contrastive_loss, forward, scr_attention)
from .synthdata import (Annotation, Sample, SiteSpec, Task, convert_bbox,
                        generate_site, sparse_annotate)
from .treefilter import (GridGraph, SpanningTree, boruvka_mst, build_grid_graph,
                         cascade_pseudo_label, mstree_loss, tree_filter)

__version__ = "0.1.0"
