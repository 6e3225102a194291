"""Built-in experiment configurations."""

FIG2_DESK = {
    "world": {"preset": "subspace-2of8", "n_train": 2000, "n_test": 1000, "train_seed": 1, "test_seed": 2},
    "model": {"hidden": [64, 64], "activation": "softplus"},
    "objective": {"smoothness": {"sigma": 1.0}},
    "schedule": {"epochs": 20, "batch_size": 64, "lr": 0.02, "decay_epochs": [15], "decay_factor": 0.1,
                 "momentum": 0.9, "weight_decay": 0.0, "lr_ref_lambda": 10.0},
    "grid": {
        "seeds": [0, 1, 2],
        "gradnorm": [0.0, 0.01, 0.1, 1.0, 100.0, 10000.0],
        "smoothness": [0.001, 0.01, 0.1, 1.0, 100.0, 3000.0],
        "randsmooth": [0.1, 0.3, 1.0, 3.0, 10.0, 30.0],
    },
    "metrics": {"n_points": 50, "radius": 4.0, "n_draws": 50, "output": "probs", "rho_sigma": 1e-3,
                "rho_n": 10000, "rho_points": 20, "n_dump": 5, "seed": 0},
    "regimes": {"delta_acc": 0.05},
}

# eps is given in units of the usual MNIST normalization (pixel std 0.3081) and
# converted to [0, 1] pixel units through eps_scale.
MNIST_DISTRACTOR = {
    "world": {"preset": "mnist-distractor", "images": "", "labels": "", "n_digits": 5000,
              "placement_seed": 0, "n_test": 1000, "test_seed": 1},
    "model": {"hidden": [256], "activation": "relu"},
    "objective": {"pgd": {"steps": 10, "eps_scale": 0.3081}},
    "schedule": {"epochs": 9, "batch_size": 128, "lr": 0.1, "decay_epochs": [3, 6], "decay_factor": 0.1,
                 "momentum": 0.9, "weight_decay": 0.0},
    "grid": {"seeds": [0], "ce": [0.0], "pgd": [1.0, 4.0, 8.0]},
    "metrics": {"n_points": 20, "radius": 4.0, "n_draws": 20, "output": "probs", "rho_sigma": 1e-3,
                "rho_n": 1000, "rho_points": 5, "n_dump": 3, "seed": 0,
                "noise_levels": [0.05, 0.1, 0.2, 0.4, 0.8], "noise_points": 300, "noise_draws": 10},
    "regimes": {"delta_acc": 0.05},
}

PRESETS = {"fig2-desk": FIG2_DESK, "mnist-distractor": MNIST_DISTRACTOR}
