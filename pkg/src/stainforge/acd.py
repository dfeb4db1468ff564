"""Adaptive color deconvolution: stain separation, objective, gradient,
and the gradient-descent fit.

The stain model per pixel is s = W * D * od, where D is the inverse of
the 3x3 stain color appearance matrix M (columns: unit OD color vectors
for hematoxylin, eosin, residual) and W = diag(wh, we, 1).

M is parameterized by the spherical angles of the H and E columns, which
keeps both columns unit-norm and inside the nonnegative octant for
angles in [0, pi/2]; the residual column is the unit cross product of H
and E. Stain weights are optimized in log domain so they stay positive
without projection.

The fitted parameters minimize

    L = L_p + lambda_b * L_b + lambda_e * L_e

where L_p penalizes residual density plus H/E co-occurrence
(2he/(h^2+e^2), a removable singularity set to 0 at h = e = 0), L_b is
the squared stain-balance gap [(1-eta)*mean(h) - eta*mean(e)]^2, and L_e
is the squared intensity gap [gamma - mean(h+e)]^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateStainsError,
    EmptySampleError,
    InsufficientTissueError,
    SingularMatrixError,
)

#: Standard H&E OD color direction priors (Ruifrok & Johnston), used as
#: the fit starting point when no other initialization is given.
RUIFROK_H = np.array([0.650, 0.704, 0.286])
RUIFROK_E = np.array([0.072, 0.990, 0.105])

#: Minimum angle between the H and E color vectors before the residual
#: direction (their cross product) is considered ill-conditioned.
MIN_STAIN_SEPARATION_DEG = 3.0

#: Condition-number guard for inverting M.
MAX_CONDITION_NUMBER = 1e6

PROFILE_SCHEMA_VERSION = 1

#: Stain weights are clamped to this range when building a profile.
WEIGHT_RANGE = (0.05, 20.0)


@dataclass(frozen=True)
class AcdHyperparams:
    """Objective weights and optimizer settings.

    Defaults were chosen by validating synthetic stain recovery, not
    taken from any external source; all are CLI-overridable.
    """

    lambda_p: float = 0.0005
    lambda_b: float = 10.0
    lambda_e: float = 1.0
    eta: float = 0.6
    gamma: float = 0.3
    learning_rate: float = 0.05
    max_iters: int = 300
    tol: float = 1e-7
    sample_n: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.eta < 1.0):
            raise ValueError(f"eta must be strictly inside (0, 1), got {self.eta}")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if min(self.lambda_p, self.lambda_b, self.lambda_e) < 0:
            raise ValueError("objective weights must be >= 0")
        if self.learning_rate <= 0 or self.tol <= 0:
            raise ValueError("learning_rate and tol must be > 0")
        if self.sample_n < 100:
            raise ValueError("sample_n must be >= 100")


@dataclass(frozen=True)
class AcdParams:
    """Unconstrained fit parameters: spherical angles of the H and E unit
    vectors plus log-domain stain weights."""

    theta_h: float
    phi_h: float
    theta_e: float
    phi_e: float
    log_wh: float = 0.0
    log_we: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.theta_h, self.phi_h, self.theta_e, self.phi_e,
             self.log_wh, self.log_we]
        )

    @classmethod
    def from_vector(cls, v) -> "AcdParams":
        return cls(*(float(x) for x in v))


@dataclass(frozen=True)
class StainProfile:
    """A fitted stain model: 3x3 color appearance matrix M (columns H, E,
    residual; each unit norm) and stain weights wh, we."""

    M: np.ndarray
    wh: float
    we: float

    def __post_init__(self):
        M = np.asarray(self.M, dtype=np.float64)
        if M.shape != (3, 3):
            raise ValueError(f"stain matrix must be 3x3, got {M.shape}")
        norms = np.linalg.norm(M, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError(f"stain matrix columns must be unit norm, got {norms}")
        if np.any(M[:, :2] < -1e-12):
            raise ValueError("H and E color vectors must be nonnegative")
        if np.linalg.cond(M) >= MAX_CONDITION_NUMBER:
            raise SingularMatrixError("stain matrix is ill-conditioned")
        lo, hi = WEIGHT_RANGE
        if not (lo <= self.wh <= hi and lo <= self.we <= hi):
            raise ValueError(f"stain weights must lie in [{lo}, {hi}]")
        object.__setattr__(self, "M", M)

    @property
    def deconvolution_matrix(self) -> np.ndarray:
        """D = M^-1, mapping OD vectors to unweighted stain densities."""
        return np.linalg.inv(self.M)

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.wh, self.we, 1.0])


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Objective value and its unweighted components."""

    l_p: float
    l_b: float
    l_e: float
    l_total: float


def unit_vector_from_angles(theta: float, phi: float) -> np.ndarray:
    """Spherical angles -> unit vector (sin t cos p, sin t sin p, cos t)."""
    st = np.sin(theta)
    return np.array([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])


def angles_from_unit_vector(v) -> tuple[float, float]:
    """Inverse of unit_vector_from_angles, normalizing the input first."""
    v = np.asarray(v, dtype=np.float64)
    v = v / np.linalg.norm(v)
    theta = float(np.arccos(np.clip(v[2], -1.0, 1.0)))
    phi = float(np.arctan2(v[1], v[0]))
    return theta, phi


def default_init_params() -> AcdParams:
    """Fit starting point: Ruifrok H&E directions, unit weights."""
    th, ph = angles_from_unit_vector(RUIFROK_H)
    te, pe = angles_from_unit_vector(RUIFROK_E)
    return AcdParams(th, ph, te, pe, 0.0, 0.0)


def _stain_columns(params: AcdParams):
    h = unit_vector_from_angles(params.theta_h, params.phi_h)
    e = unit_vector_from_angles(params.theta_e, params.phi_e)
    cross = np.cross(h, e)
    sin_angle = np.linalg.norm(cross)  # both h, e are unit
    if sin_angle < np.sin(np.deg2rad(MIN_STAIN_SEPARATION_DEG)):
        raise DegenerateStainsError(
            "H and E color vectors are separated by less than "
            f"{MIN_STAIN_SEPARATION_DEG} degrees"
        )
    return h, e, cross / sin_angle


def build_matrix(params: AcdParams) -> StainProfile:
    """Realize a StainProfile from fit parameters.

    The residual column is the unit cross product of the H and E
    vectors; raises DegenerateStainsError when they are closer than
    MIN_STAIN_SEPARATION_DEG degrees.
    """
    h, e, r = _stain_columns(params)
    lo, hi = WEIGHT_RANGE
    wh = float(np.clip(np.exp(params.log_wh), lo, hi))
    we = float(np.clip(np.exp(params.log_we), lo, hi))
    return StainProfile(M=np.column_stack([h, e, r]), wh=wh, we=we)


def separate(od: np.ndarray, profile: StainProfile) -> np.ndarray:
    """Per-pixel stain densities s = W * M^-1 * od.

    Accepts OD arrays of shape (..., 3); the result has the same shape
    with channels (hematoxylin, eosin, residual).
    """
    od = np.asarray(od, dtype=np.float64)
    if np.linalg.cond(profile.M) >= MAX_CONDITION_NUMBER:
        raise SingularMatrixError("stain matrix failed the condition-number guard")
    densities = od @ profile.deconvolution_matrix.T
    return densities * profile.weights


def recombine(densities: np.ndarray, profile: StainProfile) -> np.ndarray:
    """Algebraic inverse of separate: od = M * W^-1 * s."""
    densities = np.asarray(densities, dtype=np.float64)
    return (densities / profile.weights) @ profile.M.T


def _saturation_term(h, e):
    """2he/(h^2 + e^2) per pixel, with the h = e = 0 singularity set to 0.

    Returns (values, d/dh, d/de)."""
    sq = h * h + e * e
    safe = np.where(sq > 0, sq, 1.0)
    vals = np.where(sq > 0, 2.0 * h * e / safe, 0.0)
    denom = safe * safe
    dh = np.where(sq > 0, 2.0 * e * (e * e - h * h) / denom, 0.0)
    de = np.where(sq > 0, 2.0 * h * (h * h - e * e) / denom, 0.0)
    return vals, dh, de


def objective_from_densities(densities: np.ndarray, hp: AcdHyperparams) -> ObjectiveBreakdown:
    """Evaluate the objective on a (N, 3) array of sampled stain densities."""
    densities = np.asarray(densities, dtype=np.float64).reshape(-1, 3)
    n = densities.shape[0]
    if n == 0:
        raise EmptySampleError("objective needs at least one sampled pixel")
    h, e, d = densities[:, 0], densities[:, 1], densities[:, 2]

    sat, _, _ = _saturation_term(h, e)
    l_p = float(np.mean(d * d) + hp.lambda_p * np.mean(sat))
    balance = (1.0 - hp.eta) * h.mean() - hp.eta * e.mean()
    l_b = float(balance * balance)
    intensity_gap = hp.gamma - (h.mean() + e.mean())
    l_e = float(intensity_gap * intensity_gap)
    l_total = l_p + hp.lambda_b * l_b + hp.lambda_e * l_e
    return ObjectiveBreakdown(l_p=l_p, l_b=l_b, l_e=l_e, l_total=l_total)


def _cross_jacobian_left(e):
    """J such that d(h x e)/dh . v = v x e, expressed as J @ v."""
    return np.array([[0.0, e[2], -e[1]], [-e[2], 0.0, e[0]], [e[1], -e[0], 0.0]])


def _cross_jacobian_right(h):
    """J such that d(h x e)/de . v = h x v, expressed as J @ v."""
    return np.array([[0.0, -h[2], h[1]], [h[2], 0.0, -h[0]], [-h[1], h[0], 0.0]])


def objective_and_gradient(
    od_samples: np.ndarray, params: AcdParams, hp: AcdHyperparams
) -> tuple[ObjectiveBreakdown, np.ndarray]:
    """Objective and its analytic gradient w.r.t. the 6 fit parameters.

    od_samples is the (N, 3) array of sampled tissue-pixel OD vectors.
    The gradient order matches AcdParams.as_vector().
    """
    od_samples = np.asarray(od_samples, dtype=np.float64).reshape(-1, 3)
    n = od_samples.shape[0]
    if n == 0:
        raise EmptySampleError("gradient needs at least one sampled pixel")

    hvec, evec, rvec = _stain_columns(params)
    M = np.column_stack([hvec, evec, rvec])
    D = np.linalg.inv(M)
    w = np.array([np.exp(params.log_wh), np.exp(params.log_we), 1.0])

    pre = od_samples @ D.T          # unweighted densities, (N, 3)
    s = pre * w
    h, e, d = s[:, 0], s[:, 1], s[:, 2]

    sat, sat_dh, sat_de = _saturation_term(h, e)
    balance = (1.0 - hp.eta) * h.mean() - hp.eta * e.mean()
    intensity_gap = hp.gamma - (h.mean() + e.mean())
    l_p = float(np.mean(d * d) + hp.lambda_p * np.mean(sat))
    l_b = float(balance * balance)
    l_e = float(intensity_gap * intensity_gap)
    breakdown = ObjectiveBreakdown(
        l_p=l_p, l_b=l_b, l_e=l_e,
        l_total=l_p + hp.lambda_b * l_b + hp.lambda_e * l_e,
    )

    # dL/ds, (N, 3)
    grad_s = np.empty_like(s)
    grad_s[:, 0] = (
        hp.lambda_p * sat_dh / n
        + hp.lambda_b * 2.0 * balance * (1.0 - hp.eta) / n
        - hp.lambda_e * 2.0 * intensity_gap / n
    )
    grad_s[:, 1] = (
        hp.lambda_p * sat_de / n
        - hp.lambda_b * 2.0 * balance * hp.eta / n
        - hp.lambda_e * 2.0 * intensity_gap / n
    )
    grad_s[:, 2] = 2.0 * d / n

    # Chain rule through s = (od @ D.T) * w and D = M^-1:
    # dL/dD = (dL/ds * w)^T @ od;  dL/dM = -D^T @ dL/dD @ D^T.
    grad_D = (grad_s * w).T @ od_samples
    grad_M = -D.T @ grad_D @ D.T

    # Column derivatives w.r.t. the four angles. The residual column
    # r = (h x e)/|h x e| moves with both stains.
    st_h, ct_h = np.sin(params.theta_h), np.cos(params.theta_h)
    sp_h, cp_h = np.sin(params.phi_h), np.cos(params.phi_h)
    st_e, ct_e = np.sin(params.theta_e), np.cos(params.theta_e)
    sp_e, cp_e = np.sin(params.phi_e), np.cos(params.phi_e)
    dh_dtheta = np.array([ct_h * cp_h, ct_h * sp_h, -st_h])
    dh_dphi = np.array([-st_h * sp_h, st_h * cp_h, 0.0])
    de_dtheta = np.array([ct_e * cp_e, ct_e * sp_e, -st_e])
    de_dphi = np.array([-st_e * sp_e, st_e * cp_e, 0.0])

    cross = np.cross(hvec, evec)
    cross_norm = np.linalg.norm(cross)
    # dr/dc for r = c/|c|
    proj = (np.eye(3) - np.outer(rvec, rvec)) / cross_norm
    jac_h = proj @ _cross_jacobian_left(evec)    # dr/dh
    jac_e = proj @ _cross_jacobian_right(hvec)   # dr/de

    g_h, g_e, g_r = grad_M[:, 0], grad_M[:, 1], grad_M[:, 2]
    grad = np.empty(6)
    grad[0] = g_h @ dh_dtheta + g_r @ (jac_h @ dh_dtheta)
    grad[1] = g_h @ dh_dphi + g_r @ (jac_h @ dh_dphi)
    grad[2] = g_e @ de_dtheta + g_r @ (jac_e @ de_dtheta)
    grad[3] = g_e @ de_dphi + g_r @ (jac_e @ de_dphi)
    # d/d(log w) = w * d/dw, and ds[:,j]/dw_j = pre[:,j]
    grad[4] = float(np.dot(grad_s[:, 0], s[:, 0]))
    grad[5] = float(np.dot(grad_s[:, 1], s[:, 1]))
    return breakdown, grad


def objective(od_samples: np.ndarray, params: AcdParams, hp: AcdHyperparams) -> ObjectiveBreakdown:
    """Objective only, for callers that do not need the gradient."""
    profile = build_matrix(params)
    return objective_from_densities(separate(od_samples, profile), hp)


def sample_tissue_od(od: np.ndarray, mask: np.ndarray, hp: AcdHyperparams) -> np.ndarray:
    """Seeded uniform sample of tissue-pixel OD vectors.

    Samples without replacement when the mask holds at least sample_n
    pixels, with replacement otherwise. Fewer than 100 tissue pixels is
    an error.
    """
    tissue = np.asarray(od, dtype=np.float64)[np.asarray(mask, dtype=bool)]
    count = tissue.shape[0]
    if count < 100:
        raise InsufficientTissueError(
            f"only {count} tissue pixels; need at least 100 to fit"
        )
    rng = np.random.default_rng(hp.seed)
    idx = rng.choice(count, size=hp.sample_n, replace=count < hp.sample_n)
    return tissue[idx]


_LR_DECAY = 0.97
_LR_DECAY_EVERY = 25
_TOL_STREAK = 10
_ANGLE_BOUNDS = (0.0, np.pi / 2)


def fit(
    od: np.ndarray,
    mask: np.ndarray,
    hp: AcdHyperparams | None = None,
    init: AcdParams | None = None,
) -> tuple[StainProfile, list[ObjectiveBreakdown]]:
    """Fit a stain profile to an OD image by gradient descent.

    The step size decays x0.97 every 25 iterations; iteration stops at
    max_iters or once |delta L| < tol for 10 consecutive iterations. The
    returned profile is the one with the lowest objective seen; the
    trace records the objective at every iteration. Deterministic for a
    fixed seed.
    """
    hp = hp or AcdHyperparams()
    init = init or default_init_params()
    samples = sample_tissue_od(od, mask, hp)

    p = init.as_vector()
    best_l = np.inf
    best_p = p.copy()
    trace: list[ObjectiveBreakdown] = []
    prev_l = None
    streak = 0
    for it in range(hp.max_iters):
        breakdown, grad = objective_and_gradient(samples, AcdParams.from_vector(p), hp)
        trace.append(breakdown)
        if breakdown.l_total < best_l:
            best_l = breakdown.l_total
            best_p = p.copy()
        if prev_l is not None and abs(breakdown.l_total - prev_l) < hp.tol:
            streak += 1
            if streak >= _TOL_STREAK:
                break
        else:
            streak = 0
        prev_l = breakdown.l_total

        lr = hp.learning_rate * _LR_DECAY ** (it // _LR_DECAY_EVERY)
        p = p - lr * grad
        p[:4] = np.clip(p[:4], *_ANGLE_BOUNDS)

    return build_matrix(AcdParams.from_vector(best_p)), trace


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_profile(path, profile: StainProfile, hp: AcdHyperparams,
                 extras: dict[str, str] | None = None) -> None:
    """Serialize a profile as versioned key=value text.

    Values are formatted with 17 significant digits so the file is
    byte-stable and reloads bit-exactly. extras lets callers persist
    additional keys (e.g. template background/provenance).
    """
    lines = [f"schema_version={PROFILE_SCHEMA_VERSION}"]
    for i in range(3):
        for j in range(3):
            lines.append(f"m{i}{j}={_fmt(profile.M[i, j])}")
    lines.append(f"wh={_fmt(profile.wh)}")
    lines.append(f"we={_fmt(profile.we)}")
    for key in ("lambda_p", "lambda_b", "lambda_e", "eta", "gamma",
                "learning_rate", "tol"):
        lines.append(f"{key}={_fmt(getattr(hp, key))}")
    for key in ("max_iters", "sample_n", "seed"):
        lines.append(f"{key}={getattr(hp, key)}")
    for key, value in (extras or {}).items():
        lines.append(f"{key}={value}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_profile(path) -> tuple[StainProfile, AcdHyperparams, dict[str, str]]:
    """Load a profile file written by save_profile.

    Returns the profile, the hyperparameters it was fitted with, and
    any extra keys as strings."""
    kv = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    version = int(kv.get("schema_version", -1))
    if version != PROFILE_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported profile schema_version {version}")
    M = np.array([[float(kv[f"m{i}{j}"]) for j in range(3)] for i in range(3)])
    profile = StainProfile(M=M, wh=float(kv["wh"]), we=float(kv["we"]))
    hp = AcdHyperparams(
        lambda_p=float(kv["lambda_p"]),
        lambda_b=float(kv["lambda_b"]),
        lambda_e=float(kv["lambda_e"]),
        eta=float(kv["eta"]),
        gamma=float(kv["gamma"]),
        learning_rate=float(kv["learning_rate"]),
        max_iters=int(kv["max_iters"]),
        tol=float(kv["tol"]),
        sample_n=int(kv["sample_n"]),
        seed=int(kv["seed"]),
    )
    known = {"schema_version", "wh", "we", "lambda_p", "lambda_b", "lambda_e",
             "eta", "gamma", "learning_rate", "tol", "max_iters", "sample_n",
             "seed"} | {f"m{i}{j}" for i in range(3) for j in range(3)}
    extras = {k: v for k, v in kv.items() if k not in known}
    return profile, hp, extras
