"""Hessian-focused optimizers and the second-order criticality check.

* :func:`min_eig_vector` finds an approximate bottom eigenvector of the
  Hessian by shifted power iteration, using only Hessian-vector products.
* :func:`hessian_descent` takes one negative-curvature step of length
  ``|v^T H v| / M`` and keeps the better of the new point and the old one.
* :func:`cubic_descent` approximately minimizes the cubic-regularized model by
  gradient descent; :func:`approx_cubic_descent` does the same on a minibatch
  with an adaptive diagonal scaling of the cubic term.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .oracle import ContractError, NumericError, Oracle

log = logging.getLogger(__name__)

# Per-restart failure probability of a random-start power iteration.
_RESTART_DELTA = math.exp(-1.0)


class Tau(enum.Enum):
    HALT = "halt"
    CONTINUE = "continue"


class DescentWarning(RuntimeWarning):
    """A certified negative-curvature step fell short of its guaranteed decrease."""


@dataclass
class CurvatureEstimate:
    v: np.ndarray
    rayleigh: float
    hvp_calls: int
    confidence: float
    shift: float
    degraded: bool = False


@dataclass
class HfoResult:
    y: np.ndarray
    tau: Tau
    f_y: float
    certificate: CurvatureEstimate | None = None
    f_x: float | None = None
    step: float | None = None
    # |rayleigh|^3 / (3 M^2) when the certificate shows rayleigh <= -gamma/2
    guaranteed_decrease: float | None = None
    solver_iterations: int = 0

    @property
    def decrease(self):
        return None if self.f_x is None else self.f_x - self.f_y


def power_budget(gamma, shift, d):
    """Iterations per restart targeting ``v^T H v <= lambda_min + gamma/2``."""
    return math.ceil((8.0 / gamma) * shift * math.log(9 * d / _RESTART_DELTA))


def restart_count(rho):
    return max(1, math.ceil(math.log(1.0 / (1.0 - rho))))


def _estimate_spectral_radius(oracle, x, rng, iters, rtol=1e-3):
    z = rng.standard_normal(oracle.d)
    z /= np.linalg.norm(z)
    est, calls = 0.0, 0
    for _ in range(iters):
        hz = oracle.full_hvp(x, z)
        calls += 1
        new = float(np.linalg.norm(hz))
        if new == 0.0:
            break
        z = hz / new
        if abs(new - est) <= rtol * new:
            est = new
            break
        est = new
    return est, calls


def min_eig_vector(oracle: Oracle, x, gamma, rho=0.9, seed=0, *, shift=None,
                   max_iters=20000, tol=None, shift_iters=50) -> CurvatureEstimate:
    """Approximate unit bottom eigenvector of ``grad^2 f(x)``.

    Power iteration on ``c I - H`` with ``ceil(ln(1/(1-rho)))`` seeded random
    restarts, keeping the smallest Rayleigh quotient.  ``shift`` is ``c``:
    ``None`` uses the problem's gradient Lipschitz constant ``L`` (so
    ``c I - H`` is PSD); ``"auto"`` uses 1.25 times a short power-iteration
    estimate of the spectral radius at ``x``; a number is used as given.
    Each restart runs ``power_budget(gamma, c, d)`` iterations, capped at
    ``max_iters``; with ``tol`` set, a restart also stops once the residual
    ``|Hv - (v^T H v) v|`` drops to ``tol``.  If the cap cut a restart short,
    the estimate is flagged ``degraded`` with a proportionally reduced
    confidence.

    The returned ``rayleigh`` comes from one fresh HVP at the chosen ``v``, so
    the cost is ``n * (power iterations + 1)`` ISO calls.
    """
    if not gamma > 0:
        raise ContractError("gamma must be positive")
    if not 0 < rho < 1:
        raise ContractError("rho must lie in (0, 1)")
    x = np.asarray(x, dtype=float)
    d = oracle.d
    rng = np.random.default_rng(seed)
    calls = 0
    if shift is None:
        c = float(oracle.problem.lipschitz_grad)
    elif shift == "auto":
        radius, calls = _estimate_spectral_radius(oracle, x, rng, shift_iters)
        c = 1.25 * radius + 0.25 * gamma
    else:
        c = float(shift)

    required = power_budget(gamma, c, d)
    budget = min(required, max_iters)
    best_v, best_rq = None, math.inf
    cut_short = False
    for _ in range(restart_count(rho)):
        z = rng.standard_normal(d)
        z /= np.linalg.norm(z)
        converged = False
        for k in range(budget):
            hz = oracle.full_hvp(x, z)
            calls += 1
            rq = float(z @ hz)
            if rq < best_rq:
                best_v, best_rq = z, rq
            if tol is not None and np.linalg.norm(hz - rq * z) <= tol:
                converged = True
                break
            if k == budget - 1:
                break
            w = c * z - hz
            wn = np.linalg.norm(w)
            if wn == 0.0 or not np.isfinite(wn):
                break
            z = w / wn
        if not converged and budget < required:
            cut_short = True

    hv = oracle.full_hvp(x, best_v)
    calls += 1
    rayleigh = float(best_v @ hv)
    confidence = rho * (budget / required if cut_short else 1.0)
    return CurvatureEstimate(v=best_v, rayleigh=rayleigh, hvp_calls=calls,
                             confidence=confidence, shift=c, degraded=cut_short)


def check_second_order_critical(oracle: Oracle, x, eps, gamma, rho=0.9, seed=0,
                                **eig_options):
    """Test ``|grad f(x)| <= eps`` and a curvature certificate ``v^T H v >= -gamma``.

    Returns ``(is_critical, certificate)``.  The eigenvector search is skipped
    (certificate ``None``) when the gradient test already fails.  A degraded
    estimate (iteration cap hit before convergence) never certifies.
    """
    if not (eps > 0 and gamma > 0):
        raise ContractError("eps and gamma must be positive")
    _, g = oracle.full_grad(x)
    if np.linalg.norm(g) > eps:
        return False, None
    est = min_eig_vector(oracle, x, gamma, rho, seed, **eig_options)
    return est.rayleigh >= -gamma and not est.degraded, est


def hessian_descent(oracle: Oracle, x, eps, gamma, M, rho=0.9, seed=0, *,
                    estimate: CurvatureEstimate | None = None, **eig_options) -> HfoResult:
    """One negative-curvature step with an argmin guard.

    ``u = x - (|v^T H v| / M) sign(<v, grad f(x)>) v`` with ``sign(0) = +1``;
    returns whichever of ``u`` and ``x`` has the lower objective (ties keep
    ``x``).  A precomputed ``estimate`` at the same ``x`` may be supplied to
    skip the eigenvector search.  ``eps`` is accepted for interface symmetry
    with the other Hessian-focused optimizers and is not used.
    """
    if not (eps > 0 and gamma > 0 and M > 0):
        raise ContractError("eps, gamma and M must be positive")
    x = np.asarray(x, dtype=float)
    est = estimate if estimate is not None else \
        min_eig_vector(oracle, x, gamma, rho, seed, **eig_options)
    f_x, g = oracle.full_grad(x)
    v = est.v
    alpha = abs(est.rayleigh) / M
    sign = 1.0 if v @ g >= 0 else -1.0
    u = x - alpha * sign * v
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite Hessian-descent candidate")
    f_u = oracle.full_value(u)
    y, f_y = (u, f_u) if f_u < f_x else (x, f_x)
    oracle.problem.in_valid_region(y)

    guaranteed = None
    if est.rayleigh <= -gamma / 2:
        guaranteed = abs(est.rayleigh) ** 3 / (3 * M**2)
        if f_x - f_y < guaranteed - 1e-9:
            warnings.warn(
                f"certified step decreased f by {f_x - f_y:.3e}, below the guaranteed "
                f"{guaranteed:.3e}; M={M:g} is not a valid Hessian Lipschitz constant here",
                DescentWarning, stacklevel=2)
    return HfoResult(y=y, tau=Tau.CONTINUE, f_y=f_y, certificate=est, f_x=f_x,
                     step=alpha, guaranteed_decrease=guaranteed)


# ---------------------------------------------------------------------------
# cubic regularization


@dataclass
class CubicSubproblemConfig:
    M: float
    solver_step: float = 1e-2
    grad_tol: float = 1e-3
    max_iters: int = 10000
    # norm of the seeded start perturbation that avoids the "hard case"
    perturb: float = 1e-6

    def __post_init__(self):
        if not (self.M > 0 and self.solver_step > 0 and self.grad_tol > 0):
            raise ContractError("M, solver_step and grad_tol must be positive")
        if self.max_iters < 1:
            raise ContractError("max_iters must be >= 1")


# Solver settings used for the synthetic problem and for large instances.
SYNTHETIC_SOLVER = dict(solver_step=1e-2, grad_tol=1e-3)
LARGE_SOLVER = dict(solver_step=1e-3, grad_tol=0.1)


@dataclass
class CubicSolution:
    v: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool


def cubic_model(g, hv, v, M, scale=None):
    """Value of ``<g,v> + 1/2 <v,Hv> + M/6 |D v|^3`` given ``hv = H v``."""
    dv = v if scale is None else scale * v
    return float(g @ v + 0.5 * v @ hv + M / 6 * np.linalg.norm(dv) ** 3)


def cubic_model_grad(g, hv, v, M, scale=None):
    """Gradient ``g + Hv + M/2 |D v| D^2 v`` of :func:`cubic_model`."""
    if scale is None:
        return g + hv + 0.5 * M * np.linalg.norm(v) * v
    return g + hv + 0.5 * M * np.linalg.norm(scale * v) * scale**2 * v


def cubic_subproblem(g, hvp, M, cfg: CubicSubproblemConfig, seed=0, *, lipschitz=1.0,
                     scale=None) -> CubicSolution:
    """Gradient descent on the cubic model ``m(v)``.

    ``hvp`` maps ``v`` to ``Hv`` and is called once per solver iteration.  The
    start is ``-min(1/L, 1) * g`` plus a seeded vector of norm
    ``cfg.perturb``, so the iteration can leave the model's saddle when ``g``
    is zero or has no component along the bottom eigenvector.  Stops when
    ``|grad m| <= cfg.grad_tol`` or after ``cfg.max_iters`` HVPs.
    """
    if not M > 0:
        raise ContractError("M must be positive")
    g = np.asarray(g, dtype=float)
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(g.shape)
    v = -min(1.0 / lipschitz, 1.0) * g + cfg.perturb * q / np.linalg.norm(q)
    gnorm = math.inf
    it = 0
    while it < cfg.max_iters:
        hv = hvp(v)
        it += 1
        grad = cubic_model_grad(g, hv, v, M, scale)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= cfg.grad_tol:
            return CubicSolution(v, it, gnorm, True)
        v = v - cfg.solver_step * grad
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite cubic subproblem iterate at iteration {it}",
                               iteration=it)
    return CubicSolution(v, it, gnorm, False)


def cubic_descent(oracle: Oracle, x, eps, gamma, cfg: CubicSubproblemConfig,
                  seed=0) -> HfoResult:
    """Full-batch cubic-regularized step with an argmin guard.

    Costs ``2n`` IFO calls plus ``n`` ISO calls per solver iteration.
    """
    x = np.asarray(x, dtype=float)
    f_x, g = oracle.full_grad(x)
    sol = cubic_subproblem(g, lambda w: oracle.full_hvp(x, w), cfg.M, cfg, seed,
                           lipschitz=oracle.problem.lipschitz_grad)
    u = x + sol.v
    f_u = oracle.full_value(u)
    y, f_y = (u, f_u) if f_u < f_x else (x, f_x)
    oracle.problem.in_valid_region(y)
    return HfoResult(y=y, tau=Tau.CONTINUE, f_y=f_y, f_x=f_x,
                     step=float(np.linalg.norm(y - x)), solver_iterations=sol.iterations)


@dataclass
class DiagScaleState:
    """Moving average ``s <- beta s + (1-beta)(|g|^3 + 2 g^2)`` and its diagonal."""

    s: np.ndarray
    beta: float = 0.9
    floor: float = 1e-12
    exponent: float = 1.0 / 9.0

    @classmethod
    def zeros(cls, d, **kw):
        return cls(np.zeros(d), **kw)

    def updated(self, g) -> "DiagScaleState":
        g = np.asarray(g, dtype=float)
        ag = np.abs(g)
        s = self.beta * self.s + (1 - self.beta) * (ag**3 + 2 * g * g)
        return DiagScaleState(s, self.beta, self.floor, self.exponent)

    @property
    def diag(self):
        return (self.s + self.floor) ** self.exponent


def approx_cubic_descent(oracle: Oracle, x, batch, M, scale: DiagScaleState,
                         cfg: CubicSubproblemConfig, seed=0):
    """Minibatch cubic step with adaptive diagonal scaling.

    Samples ``batch`` indices without replacement, updates ``scale`` with the
    minibatch gradient and solves the scaled model on the minibatch Hessian.
    The step is applied unconditionally, so non-increase holds only in
    expectation; increases of the full objective are logged.

    Returns ``(HfoResult, new_scale)``.
    """
    n = oracle.n
    if not 1 <= batch <= n:
        raise ContractError(f"batch must be in [1, {n}]")
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=batch, replace=False))
    _, g = oracle.minibatch_grad(idx, x)
    new_scale = scale.updated(g)
    sol = cubic_subproblem(g, lambda w: oracle.minibatch_hvp(idx, x, w), M, cfg,
                           int(rng.integers(2**63)), lipschitz=oracle.problem.lipschitz_grad,
                           scale=new_scale.diag)
    y = x + sol.v
    problem = oracle.problem
    f_x, f_y = problem.mean_value(x), problem.mean_value(y)
    if f_y > f_x:
        log.info("approx cubic step increased f: %.6e -> %.6e", f_x, f_y)
    problem.in_valid_region(y)
    result = HfoResult(y=y, tau=Tau.CONTINUE, f_y=float(f_y), f_x=float(f_x),
                       step=float(np.linalg.norm(sol.v)), solver_iterations=sol.iterations)
    return result, new_scale
