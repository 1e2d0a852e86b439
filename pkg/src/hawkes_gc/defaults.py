"""Default values shared by the library and the command line."""

# estimator
GAMMA1 = 0.1
GAMMA2 = 0.05
GAMMA0 = 1e-4
P_SELECT = 0.99
LAMBDA1 = 0.0
PHASE1_ITERS = 1000
PHASE1_HALVE_EVERY = 200
MU_INIT_RANGE = (0.01, 0.1)
FEASIBILITY_TOL = 1e-12
MAX_INNER_ITERS = 300
MAX_EPOCHS = 60
SEED = 0

# baselines
VANILLA_GAMMA = 0.05
VANILLA_ITERS = 1000
EARLY_STOP_GAMMA = 0.05
RESTART_SGD_GAMMA = 0.05

# simulation
SYNTH_BETA = 0.8
NEG_FRACTION = 0.1
DAG_STEP = 0.05
DAG_MAX_ITER = 200_000
DAG_TOL = 1e-8
MAX_EVENTS_PER_SEQUENCE = 1_000_000

# graph and chains
STRENGTH_CUTS = (5e-4, 1e-3)
MAX_CHAIN_LEN = 4
CHAIN_CAP = 100_000
ALPHA = 0.1

# grids
BETA_GRID = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2)
LAMBDA1_GRID = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5)
GAMMA1_GRID = (GAMMA1,)

# ingest
BIN_HOURS = 1.0
