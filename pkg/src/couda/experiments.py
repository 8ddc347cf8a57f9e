"""Multi-seed experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import ShiftSpec, make_bundle
from .metrics import estimated_Q, q_error
from .model import Architecture, build_model
from .training import COMPONENTS, TrainConfig, infer, train

# 30 degree rotation plus a shift along x; the rotation alone leaves the three
# symmetric clusters inside their own decision regions
ADAPTATION_SPEC = ShiftSpec(n_classes=3, dim=2, per_class=200, rotation=math.radians(30), translation=(1.0, 0.0))
RECOVERY_SPEC = ShiftSpec(n_classes=3, dim=2, per_class=300, rotation=math.radians(30))


def _fit(bundle, cfg: TrainConfig):
    model = build_model(Architecture(bundle.dim, bundle.n_classes), cfg.seed, cfg.eps_init)
    model, _ = train(model, bundle, cfg)
    return model


def target_accuracy(model, bundle, ensemble: str = "average") -> float:
    _, labels = infer(model, bundle.target_test_x, ensemble)
    return float(np.mean(labels == bundle.target_test_y))


@dataclass
class RecoveryResult:
    errors: list[float]
    matrices: list[np.ndarray]

    @property
    def median(self) -> float:
        return float(np.median(self.errors))


def noise_recovery(
    seeds=range(5),
    spec: ShiftSpec = RECOVERY_SPEC,
    noise: float = 0.2,
    steps: int = 5000,
    eps_init: float = 0.8,
) -> RecoveryResult:
    """Train once per seed and compare the learned transition with the true one."""
    errors, mats = [], []
    for seed in seeds:
        bundle = make_bundle(spec, noise, 0.0, seed)
        model = _fit(bundle, TrainConfig(steps=steps, seed=seed, eps_init=eps_init))
        q = estimated_Q(model, bundle.source_x)
        errors.append(q_error(q, bundle.true_Q)[0])
        mats.append(q)
    return RecoveryResult(errors, mats)


@dataclass
class AdaptationResult:
    accuracy: dict[str, list[float]]

    def mean(self, variant: str) -> float:
        return float(np.mean(self.accuracy[variant]))


def adaptation_benefit(
    seeds=range(5),
    spec: ShiftSpec = ADAPTATION_SPEC,
    noise: float = 0.1,
    p_class: float = 0.5,
    steps: int = 12000,
    eps_init: float = 0.2,
    variants=("full", "source_only", "no_ncl"),
) -> AdaptationResult:
    """Target-test accuracy of each component variant, one fresh bundle per seed."""
    acc: dict[str, list[float]] = {v: [] for v in variants}
    for seed in seeds:
        bundle = make_bundle(spec, noise, p_class, seed)
        base = TrainConfig(steps=steps, seed=seed, eps_init=eps_init)
        for v in variants:
            model = _fit(bundle, replace(base, **COMPONENTS[v]))
            acc[v].append(target_accuracy(model, bundle))
    return AdaptationResult(acc)
