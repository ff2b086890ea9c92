"""Similarity self-join over disk-resident vectors under a memory budget."""
from .bucket_graph import BucketGraph, PruneBudget, build_graph
from .bucketizer import BucketStore, assign_and_layout, select_centers
from .center_index import CenterIndex, build_index
from .config import JoinConfig
from .dataset import DatasetHandle, gen_synthetic, open_dataset
from .evaluator import PairSet, brute_force_join, calibrate_epsilon, recall
from .executor import RunStats, run_join
from .orchestrator import belady_plan, orchestrate, reorder
from .pipeline import run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BucketGraph", "BucketStore", "CenterIndex", "DatasetHandle", "JoinConfig", "PairSet",
    "PruneBudget", "RunStats", "assign_and_layout", "belady_plan", "brute_force_join", "build_graph",
    "build_index", "calibrate_epsilon", "gen_synthetic", "open_dataset", "orchestrate", "recall",
    "reorder", "run_join", "run_pipeline", "select_centers",
]
