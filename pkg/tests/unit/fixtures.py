from .constants import (
    BATCH_SIZE,
    CLIP,
    D,
    DELTA,
    EPSILON,
    ETA,
    EXAMPLES_PER_CLIENT,
    K,
    K_STAR,
    N_CLIENTS,
    SEED,
)

training_config = {
    "d": D,
    "k": K,
    "N_clients": N_CLIENTS,
    "examples_per_client": EXAMPLES_PER_CLIENT,
    "B": BATCH_SIZE,
    "epochs": 2,
    "epsilon": EPSILON,
    "delta": DELTA,
    "C": CLIP,
    "eta": ETA,
    "seed": SEED,
    "task": {"kind": "lowrank_regression", "k_star": K_STAR},
}

# no noise, no clipping, every client in every round
degenerate_config = {
    **training_config,
    "k": D,
    "N_clients": 4,
    "examples_per_client": 1,
    "B": 4,
    "epochs": 50,
    "C": float("inf"),
    "noise_multiplier": 0.0,
    "value_bound": 1000.0,
    "scale_bits": 44,
    "gamma_floor": 1e-8,
}
