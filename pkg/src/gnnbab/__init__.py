"""Branch-and-bound verification of ReLU networks with learned GNN branching."""
from .bab import BranchDecision, Subdomain, Verdict, improvement, pick_out, split_relu, verify
from .bounds import LayerBounds, ReluDecisionMap, alpha_beta, interval_bounds, linbound_bounds
from .branching import (GnnStrategy, RandomStrategy, SrStrategy, StrongStrategy, make_strategy,
                        strong_branch)
from .gnn import GnnParams
from .lp import LpProblem, LpSolution, build_planet_lp, output_lower_bound, simplex_solve
from .network import (InputBox, Layer, Network, VerificationProblem, encode_property, evaluate,
                      load_network, load_property)

__version__ = "0.1.0"
