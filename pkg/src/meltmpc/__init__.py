"""meltmpc: closed-loop melt-pool temperature control workbench.

Simulates a laser deposition thermal process on a voxel grid, learns a
multi-step time-series surrogate of melt-pool temperature and depth, and
drives the simulated process with a constrained multi-step model predictive
controller, benchmarked against PID.
"""

__version__ = "0.1.0"
