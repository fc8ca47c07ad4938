"""Cost-optimal ISP routing with Opsec boxes and tunnel accounting."""
from .graph import (PRESETS, Graph, GraphError, TrafficMatrix, box_ranking, gen_gravity_matrix, load_graph,
                    preset_graph, save_graph, split_matrix, synthetic_instance, waxman_graph)
from .model import (FlowSolution, Infeasible, IterationLimit, NoBox, RoutingModel, build_multi_box,
                    build_single_box, plan_multi_box, plan_single_box, solve)
from .sweep import CSV_HEADER, SweepPoint, calibrate_capacity, is_monotone, parse_ratios, sweep_opsec_ratio
from .tunnels import NonConservative, TunnelReport, decompose_paths

__all__ = ["CSV_HEADER", "FlowSolution", "Graph", "GraphError", "Infeasible", "IterationLimit", "NoBox",
           "NonConservative", "PRESETS", "RoutingModel", "SweepPoint", "TrafficMatrix", "TunnelReport",
           "box_ranking", "calibrate_capacity", "is_monotone", "parse_ratios", "synthetic_instance", "build_multi_box", "build_single_box", "decompose_paths", "gen_gravity_matrix",
           "load_graph", "plan_multi_box", "plan_single_box", "preset_graph", "save_graph", "solve",
           "split_matrix", "sweep_opsec_ratio", "waxman_graph"]
