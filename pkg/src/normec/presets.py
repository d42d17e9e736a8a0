"""Named experiment configs."""

from __future__ import annotations

import copy

from normec.harness import ExperimentConfig

STEP_GRID = [0.001, 0.01, 0.1, 1.0]
BETA_GRID = [0.01, 0.1, 1.0, 10.0]
ALPHA_GRID = [0.01, 0.1, 1.0]

_PRESETS: dict[str, tuple[str, dict]] = {
    "example1-stall": (
        "Two opposing 1-d clients: memoryless normalization stalls at x=2, alpha-NormEC converges.",
        {
            "name": "example1-stall",
            "problem": {"kind": "counterexample"},
            "params": {"x0": [2.0]},
            "variants": [
                {"algo": "dpsgd-norm", "alpha": 0.0, "gamma": 0.1, "K": 1000},
                {"algo": "normec", "alpha": 0.5, "beta": 0.25, "K": 2000, "step_rule": "theorem1", "step_fraction": 0.5},
            ],
        },
    ),
    "theorem1-suite": (
        "20 seeded quadratics with conforming parameters and K=5000; every bound check must pass.",
        {"name": "theorem1-suite", "suite": {"kind": "theorem1", "count": 20, "K": 5000}},
    ),
    "sweep-grid": (
        "Private alpha-NormEC over the gamma x beta x alpha grid (48 cells) on a 10-client quadratic.",
        {
            "name": "sweep-grid",
            "algo": "normec",
            "problem": {"kind": "quadratic", "n": 10, "d": 20, "heterogeneity": 1.0, "seed": 0},
            "params": {"K": 300},
            "privacy": {"eps": 8.0, "delta": 1e-5},
            "grid": {"gamma": STEP_GRID, "beta": BETA_GRID, "alpha": ALPHA_GRID},
        },
    ),
    "ef-benefit": (
        "Error compensation against memoryless normalization on a heterogeneous quadratic (no noise).",
        {
            "name": "ef-benefit",
            "problem": {"kind": "quadratic", "n": 4, "d": 4, "heterogeneity": 5.0, "seed": 0},
            "params": {"alpha": 0.01, "K": 1000, "server_normalization": False},
            "variants": [
                {"algo": "normec-no-server-norm", "beta": 0.01},
                {"algo": "normec-no-server-norm", "beta": 0.1},
                {"algo": "dpsgd-norm"},
            ],
            "grid": {"gamma": STEP_GRID},
        },
    ),
    "dp-logistic": (
        "Private logistic regression: alpha-NormEC, DP-Clip21 and DP-SGD with clipping at eps=8.",
        {
            "name": "dp-logistic",
            "problem": {"kind": "logistic", "n": 10, "d": 10, "samples_per_client": 50, "seed": 0},
            "params": {"K": 300, "tau": 1.0, "alpha": 1.0, "beta": 0.1},
            "privacy": {"eps": 8.0, "delta": 1e-5},
            "variants": [{"algo": "normec"}, {"algo": "dp-clip21"}, {"algo": "dpsgd-clip"}],
            "grid": {"gamma": [0.001, 0.01, 0.1]},
        },
    ),
}


def preset_names() -> list[str]:
    return list(_PRESETS)


def describe(name: str) -> str:
    return _lookup(name)[0]


def preset_dict(name: str) -> dict:
    return copy.deepcopy(_lookup(name)[1])


def get_preset(name: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(preset_dict(name))


def _lookup(name: str):
    try:
        return _PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(_PRESETS)}") from None
