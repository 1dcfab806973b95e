"""Federated graph learning with network inpainting on population graphs."""

from .datagen import CohortSpec, generate_population, load_dataset, partition_clients, save_dataset
from .graphcons import GraphParams, PopulationGraph, construct_graph
from .harness import ExperimentConfig, run_ablation, run_experiment

__version__ = "0.1.0"

__all__ = [
    "CohortSpec", "ExperimentConfig", "GraphParams", "PopulationGraph", "construct_graph",
    "generate_population", "load_dataset", "partition_clients", "run_ablation", "run_experiment",
    "save_dataset",
]
