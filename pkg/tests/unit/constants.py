SEED = 20240917
D = 12
K = 4
K_STAR = 2
N_CLIENTS = 6
EXAMPLES_PER_CLIENT = 3
BATCH_SIZE = 3
EPSILON = 8.0
DELTA = 1e-5
CLIP = 1.0
ETA = 0.05
