"""Unsupervised object discovery in image collections.

The pipeline turns precomputed convolutional feature tensors into object
boxes: saliency maps and topological persistence yield grouped region
proposals, cosine similarities over pooled region descriptors yield
sparse score matrices, and a greedy block-coordinate ascent jointly
selects regions and an image graph, optionally in a memory-budgeted
two-stage form for large collections.
"""

from .geometry import Box, iou
from .tensor_store import (
    DatasetManifest,
    FeatureTensor,
    GlobalDescriptor,
    load_manifest,
    load_tensor,
    save_tensor,
    validate_manifest,
)
from .saliency import LocalMaximum, SaliencyMap, compute_persistence, global_saliency, local_saliency, select_maxima
from .proposals import Proposal, ProposalParams, ProposalSet, fuse_layers, generate_for_layer, map_grid_box_to_image
from .region_features import RegionDescriptor, build_region_descriptors, cosine, roi_pool
from .matching import ScoreMatrix, ScoreSet, compute_scores, memory_cost, prefilter_neighbors, score_pair
from .discovery import (
    DiscoveryConfig,
    DiscoverySolution,
    objective,
    postprocess_multi,
    postprocess_single,
    run,
    update_edges,
    update_regions,
)
from .largescale import BudgetPlan, plan_budget, run_two_stage
from .evaluation import corloc, corret, detection_rate, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "Box",
    "iou",
    "DatasetManifest",
    "FeatureTensor",
    "GlobalDescriptor",
    "load_manifest",
    "load_tensor",
    "save_tensor",
    "validate_manifest",
    "LocalMaximum",
    "SaliencyMap",
    "compute_persistence",
    "global_saliency",
    "local_saliency",
    "select_maxima",
    "Proposal",
    "ProposalParams",
    "ProposalSet",
    "fuse_layers",
    "generate_for_layer",
    "map_grid_box_to_image",
    "RegionDescriptor",
    "build_region_descriptors",
    "cosine",
    "roi_pool",
    "ScoreMatrix",
    "ScoreSet",
    "compute_scores",
    "memory_cost",
    "prefilter_neighbors",
    "score_pair",
    "DiscoveryConfig",
    "DiscoverySolution",
    "objective",
    "postprocess_multi",
    "postprocess_single",
    "run",
    "update_edges",
    "update_regions",
    "BudgetPlan",
    "plan_budget",
    "run_two_stage",
    "corloc",
    "corret",
    "detection_rate",
    "generate_synthetic",
]
