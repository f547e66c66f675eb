"""Backward stochastic differential equations and their second-order
extension on finite filtered trees, solved exactly by backward recursion."""

from .bsde import solve_bsde, solve_bsde_picard, solve_bsde_stepwise, solve_rbsde
from .lattice import FilteredTree, build_tree, enumerate_pastings, make_family
from .scenario import Scenario, load_fixture, load_scenario, validate_scenario
from .twobsde import decompose, solve_2bsde, value_function, value_function_oracle

__version__ = "0.1.0"

__all__ = [
    "FilteredTree", "Scenario", "build_tree", "decompose", "enumerate_pastings", "load_fixture", "load_scenario",
    "make_family", "solve_2bsde", "solve_bsde", "solve_bsde_picard", "solve_bsde_stepwise", "solve_rbsde",
    "validate_scenario", "value_function", "value_function_oracle",
]
