"""Self-test comparing the analytic objective gradient with central
finite differences, runnable from the CLI."""

from __future__ import annotations

import numpy as np

from .acd import AcdHyperparams, AcdParams, objective, objective_and_gradient

FD_STEP = 1e-5
REL_TOLERANCE = 1e-4
#: Partials smaller than this are compared absolutely instead of relatively.
ABS_FLOOR = 1e-8


def random_point(rng: np.random.Generator) -> tuple[np.ndarray, AcdParams, AcdHyperparams]:
    """One random (pixel sample, parameters, hyperparams) triple with the
    stain vectors kept comfortably apart."""
    n = int(rng.integers(50, 400))
    od = rng.uniform(0.0, 1.5, size=(n, 3))
    while True:
        angles = rng.uniform(0.05, np.pi / 2 - 0.05, size=4)
        params = AcdParams(*angles, *rng.uniform(-0.5, 0.5, size=2))
        h_dir = np.array([np.sin(angles[0]) * np.cos(angles[1]),
                          np.sin(angles[0]) * np.sin(angles[1]), np.cos(angles[0])])
        e_dir = np.array([np.sin(angles[2]) * np.cos(angles[3]),
                          np.sin(angles[2]) * np.sin(angles[3]), np.cos(angles[2])])
        if np.linalg.norm(np.cross(h_dir, e_dir)) > np.sin(np.deg2rad(10)):
            break
    hp = AcdHyperparams(
        lambda_p=float(rng.uniform(0.0, 0.01)),
        lambda_b=float(rng.uniform(0.1, 20.0)),
        lambda_e=float(rng.uniform(0.1, 5.0)),
        eta=float(rng.uniform(0.2, 0.8)),
        gamma=float(rng.uniform(0.1, 1.0)),
        seed=int(rng.integers(0, 2**32)),
    )
    return od, params, hp


def finite_difference_gradient(od, params: AcdParams, hp: AcdHyperparams,
                               step: float = FD_STEP) -> np.ndarray:
    """Central differences of the objective over the 6 parameters."""
    base = params.as_vector()
    grad = np.empty(6)
    for i in range(6):
        hi, lo = base.copy(), base.copy()
        hi[i] += step
        lo[i] -= step
        l_hi = objective(od, AcdParams.from_vector(hi), hp).l_total
        l_lo = objective(od, AcdParams.from_vector(lo), hp).l_total
        grad[i] = (l_hi - l_lo) / (2.0 * step)
    return grad


def max_relative_error(seed: int = 0, points: int = 100,
                       perturb: float = 0.0) -> float:
    """Worst per-coordinate discrepancy over random points.

    Coordinates with |finite difference| < ABS_FLOOR are compared
    absolutely. perturb injects a deliberate gradient error and exists
    only so the negative-control test can prove the check would fail.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        od, params, hp = random_point(rng)
        _, analytic = objective_and_gradient(od, params, hp)
        analytic = analytic + perturb
        numeric = finite_difference_gradient(od, params, hp)
        for a, f in zip(analytic, numeric):
            if abs(f) < ABS_FLOOR:
                err = abs(a - f)
            else:
                err = abs(a - f) / abs(f)
            worst = max(worst, err)
    return worst
