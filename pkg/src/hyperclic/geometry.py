"""Poincaré ball primitives with closed-form gradients.

All functions accept arrays whose last axis holds coordinates and broadcast
over any leading batch axes. Everything is computed in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GradientUndefinedError, InvalidInputError

logger = logging.getLogger(__name__)

# below this tangent norm the exp/log maps switch to their Taylor expansions
_SMALL = 1e-7


@dataclass(frozen=True)
class BallConfig:
    """Curvature, boundary clamp and dimension of a Poincaré ball."""

    c: float = 1.0
    boundary_eps: float = 1e-5
    dim: int = 64

    def __post_init__(self):
        if not self.c > 0:
            raise ConfigError(f"curvature must be positive, got {self.c}")
        if not 0 < self.boundary_eps < 1e-2:
            raise ConfigError(f"boundary_eps must lie in (0, 1e-2), got {self.boundary_eps}")
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")

    @property
    def max_norm(self) -> float:
        return (1.0 - self.boundary_eps) / np.sqrt(self.c)


DEFAULT_BALL = BallConfig()


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("non-finite coordinates")
    return arr


def _sqnorm(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=-1, keepdims=True)


def _norm(x: np.ndarray) -> np.ndarray:
    return np.sqrt(_sqnorm(x))


def project_to_ball(p, cfg: BallConfig = DEFAULT_BALL) -> np.ndarray:
    """Rescale points whose norm exceeds ``cfg.max_norm`` back onto that shell."""
    p = _as_array(p)
    norm = _norm(p)
    scale = np.where(norm > cfg.max_norm, cfg.max_norm / np.maximum(norm, 1e-300), 1.0)
    return p * scale


def mobius_add(p1, p2, cfg: BallConfig = DEFAULT_BALL) -> np.ndarray:
    """Möbius addition ``p1 ⊕_c p2``."""
    x = _as_array(p1)
    y = _as_array(p2)
    c = cfg.c
    xy = np.sum(x * y, axis=-1, keepdims=True)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    num = (1 + 2 * c * xy + c * y2) * x + (1 - c * x2) * y
    den = 1 + 2 * c * xy + c * c * x2 * y2
    return project_to_ball(num / den, cfg)


def hyperbolic_distance(p1, p2, cfg: BallConfig = DEFAULT_BALL) -> np.ndarray | float:
    """Geodesic distance ``2/√c · artanh(√c ‖-p1 ⊕ p2‖)``.

    The artanh argument is clipped to ``[0, 1 - boundary_eps]``.
    """
    x = _as_array(p1)
    y = _as_array(p2)
    c = cfg.c
    sc = np.sqrt(c)
    # c‖-x ⊕ y‖² = cδ / (αβ + cδ); exact zero for coincident points and symmetric
    alpha = 1.0 - c * _sqnorm(x)
    beta = 1.0 - c * _sqnorm(y)
    cdelta = c * _sqnorm(x - y)
    arg = np.sqrt(cdelta / (alpha * beta + cdelta))[..., 0]
    hi = 1.0 - cfg.boundary_eps
    if np.any(arg > hi):
        logger.debug("clipping %d artanh arguments to %g", int(np.sum(arg > hi)), hi)
    arg = np.clip(arg, 0.0, hi)
    d = 2.0 / sc * np.arctanh(arg)
    return float(d) if d.ndim == 0 else d


def _distance_terms(x: np.ndarray, y: np.ndarray, c: float):
    # arccosh form: cosh(√c d) = 1 + 2cδ/(αβ)
    alpha = 1.0 - c * _sqnorm(x)
    beta = 1.0 - c * _sqnorm(y)
    diff = x - y
    delta = _sqnorm(diff)
    gm1 = 2.0 * c * delta / (alpha * beta)
    # sqrt(γ² - 1) computed as sqrt((γ-1)(γ+1)) to keep precision near γ = 1
    root = np.sqrt(gm1 * (gm1 + 2.0))
    return alpha, beta, diff, delta, root


def distance_gradient(p1, p2, cfg: BallConfig = DEFAULT_BALL) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean gradients of ``hyperbolic_distance`` w.r.t. both arguments.

    Raises :class:`GradientUndefinedError` when any pair coincides.
    """
    x = _as_array(p1)
    y = _as_array(p2)
    c = cfg.c
    alpha, beta, diff, delta, root = _distance_terms(x, y, c)
    if np.any(root == 0):
        raise GradientUndefinedError("distance gradient undefined at coincident points")
    coef = 4.0 * c / (alpha * beta * np.sqrt(c) * root)
    gx = coef * (diff + c * delta * x / alpha)
    gy = coef * (-diff + c * delta * y / beta)
    return gx, gy


def distance_gradient_safe(x: np.ndarray, y: np.ndarray, cfg: BallConfig = DEFAULT_BALL):
    """Like :func:`distance_gradient` but returns zero at coincident pairs.

    Used inside losses where a coincident pair is a measure-zero event and
    zero is a valid subgradient. Pairs whose artanh argument is clipped in
    :func:`hyperbolic_distance` also get zero, matching the flat forward.
    """
    c = cfg.c
    alpha, beta, diff, delta, root = _distance_terms(x, y, c)
    arg2 = c * delta / (alpha * beta + c * delta)
    ok = (root > 0) & (arg2 <= (1.0 - cfg.boundary_eps) ** 2)
    coef = np.where(ok, 4.0 * c / (alpha * beta * np.sqrt(c) * np.where(ok, root, 1.0)), 0.0)
    gx = coef * (diff + c * delta * x / alpha)
    gy = coef * (-diff + c * delta * y / beta)
    return gx, gy


def exp_map_zero(x, cfg: BallConfig = DEFAULT_BALL) -> np.ndarray:
    """Exponential map at the origin, ``tanh(√c‖x‖) x / (√c‖x‖)``."""
    x = _as_array(x)
    sc = np.sqrt(cfg.c)
    n = _norm(x)
    u = sc * n
    safe = np.where(u < _SMALL, 1.0, u)
    factor = np.where(u < _SMALL, 1.0 - u * u / 3.0, np.tanh(safe) / safe)
    return project_to_ball(factor * x, cfg)


def exp_map_zero_vjp(x: np.ndarray, grad_out: np.ndarray, cfg: BallConfig = DEFAULT_BALL) -> np.ndarray:
    """Vector-Jacobian product of :func:`exp_map_zero` (including the clamp)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    sc = np.sqrt(cfg.c)
    n = _norm(x)
    u = sc * n
    safe_u = np.where(u < _SMALL, 1.0, u)
    safe_n = np.where(u < _SMALL, 1.0, n)
    t = np.tanh(safe_u)
    f = np.where(u < _SMALL, 1.0 - u * u / 3.0, t / safe_u)
    # f'(n)/n, with limit -2c/3 at the origin
    fprime_over_n = np.where(
        u < _SMALL,
        -2.0 * cfg.c / 3.0,
        (safe_u * (1.0 - t * t) - t) / (sc * safe_n**3),
    )
    xg = np.sum(x * g, axis=-1, keepdims=True)
    out = f * g + fprime_over_n * xg * x
    # points clamped to the shell: z = r_max x/‖x‖
    clamped = (f * n) > cfg.max_norm
    if np.any(clamped):
        xhat = x / safe_n
        radial = np.sum(xhat * g, axis=-1, keepdims=True)
        out_clamped = cfg.max_norm / safe_n * (g - radial * xhat)
        out = np.where(clamped, out_clamped, out)
    return out


def log_map_zero(p, cfg: BallConfig = DEFAULT_BALL) -> np.ndarray:
    """Logarithmic map at the origin, inverse of :func:`exp_map_zero`."""
    p = _as_array(p)
    sc = np.sqrt(cfg.c)
    n = _norm(p)
    u = np.minimum(sc * n, 1.0 - cfg.boundary_eps)
    safe = np.where(u < _SMALL, 0.5, u)
    factor = np.where(u < _SMALL, 1.0 + u * u / 3.0, np.arctanh(safe) / safe)
    return factor * p


def riemannian_rescale(euclid_grad, p, cfg: BallConfig = DEFAULT_BALL) -> np.ndarray:
    """Convert a Euclidean gradient at ``p`` into a Riemannian one."""
    g = _as_array(euclid_grad)
    p = _as_array(p)
    return g * ((1.0 - cfg.c * _sqnorm(p)) ** 2 / 4.0)
