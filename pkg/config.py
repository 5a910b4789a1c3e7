# Run defaults for the netsem command line.
#
# Scenario files may override the experiment settings below; command-line
# flags override both.

import pathlib

# Root seed for every simulation substream.
SEED = 54321

# Number of connected units per simulated dataset.
N_UNITS = 500

# Counterfactual replicates behind each psi0 estimate.
TRUTH_REPS = 2000

# Observed datasets per estimator benchmark.
EXPERIMENT_REPS = 500

# Parametric bootstrap samples per estimate (0 turns the bootstrap off).
N_BOOT = 100

# Scenarios in a dependence sweep.
SWEEP_K = 9

SCENARIO_DIR = pathlib.Path("data/scenarios")
OUTPUT_DIR = pathlib.Path("data/output")

# Environment variable read when --threads is not given.
THREADS_ENV = "NETSEM_THREADS"
