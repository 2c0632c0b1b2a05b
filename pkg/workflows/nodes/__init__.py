"""
Workflow nodes module.

One node per command; each takes a RunContext and returns the command summary:
- data: dataset generation
- latency: latency pairs and predictor fitting
- search: hardware-aware architecture search
- training: stand-alone training of the searched architecture
- transform: deep-to-shallow transformation and equivalence check
- elastic: BN calibration and per-resolution evaluation
- ablation: ablation studies
- report: tables and plots over the produced artifacts
"""

from workflows.nodes.ablation import ablate_node
from workflows.nodes.data import gen_data_node
from workflows.nodes.elastic import calibrate_node, eval_node
from workflows.nodes.latency import latency_fit_node
from workflows.nodes.report import report_node
from workflows.nodes.search import search_node
from workflows.nodes.shared import RunContext
from workflows.nodes.training import train_node
from workflows.nodes.transform import transform_node, verify_node

__all__ = [
    "RunContext",
    "gen_data_node",
    "latency_fit_node",
    "search_node",
    "train_node",
    "transform_node",
    "verify_node",
    "calibrate_node",
    "eval_node",
    "ablate_node",
    "report_node",
]
