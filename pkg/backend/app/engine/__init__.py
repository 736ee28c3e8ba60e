# Merging engine package: simulation, arrival predictors, conformal bounds, planner
from .core import EngineError, ZoneConfig
from .conformal import ConformalTable, build_table, evaluate_coverage
from .loop import batch_evaluate, run_closed_loop
from .planner import solve_problem1_oracle, solve_problem2
