"""Alternating driver: a gradient-focused optimizer followed by a Hessian-focused one.

Each outer iteration runs the GFO from the current point, hands either its
sampled iterate ``y`` (probability ``p``) or its final iterate ``z`` to the
second-order criticality check, and otherwise takes one HFO step from there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import gfo, hfo
from .oracle import Budget, ContractError, Oracle
from .trace import TraceRow

# Fixed labels for per-run random substreams.
STREAMS = {"mix": 1, "gfo": 2, "check": 3, "hfo": 4, "samples": 5}


def substream(seed, label):
    return np.random.default_rng([int(seed), STREAMS[label]])


def _draw_seed(rng):
    return int(rng.integers(2**63))


# ---------------------------------------------------------------------------
# strategies


class SvrgStrategy:
    deterministic = False

    def __init__(self, problem, eps, step_size=None, epoch_len=None, total_inner_iters=None,
                 batch=1):
        self.base = gfo.SvrgConfig.from_problem(
            problem, eps, step_size=step_size, epoch_len=epoch_len,
            total_inner_iters=total_inner_iters, batch=batch)

    def __call__(self, oracle, x, seed):
        cfg = gfo.SvrgConfig(self.base.epoch_len, self.base.step_size,
                             self.base.total_inner_iters, seed, self.base.batch)
        return gfo.svrg_run(oracle, x, cfg)


class GdStrategy:
    deterministic = True

    def __init__(self, problem, eps, step=None, iters=1):
        self.step = step if step is not None else 1.0 / problem.lipschitz_grad
        self.iters = iters

    def __call__(self, oracle, x, seed):
        return gfo.gd_run(oracle, x, self.step, self.iters, seed)


class SgdStrategy:
    deterministic = False

    def __init__(self, problem, eps, step=None, batch=1, iters=None):
        self.step = step if step is not None else 1.0 / problem.lipschitz_grad
        self.batch = batch
        self.iters = iters if iters is not None else problem.n

    def __call__(self, oracle, x, seed):
        return gfo.sgd_run(oracle, x, self.step, self.batch, self.iters, seed)


class AdamStrategy:
    """Adam whose moment estimates persist across outer iterations."""

    deterministic = False

    def __init__(self, problem, eps, alpha=1e-3, adam_eps=1e-8, beta1=0.9, beta2=0.999,
                 batch=1, iters=None):
        self.kw = dict(alpha=alpha, eps=adam_eps, beta1=beta1, beta2=beta2, batch=batch,
                       iters=iters if iters is not None else problem.n)
        self.state = None

    def __call__(self, oracle, x, seed):
        if self.state is None:
            self.state = gfo.AdamState(np.zeros(oracle.d), np.zeros(oracle.d))
        return gfo.adam_run(oracle, x, seed=seed, state=self.state, **self.kw)


class HessianDescentStrategy:
    accepts_estimate = True

    def __init__(self, problem, eps, gamma, rho, M=None, **eig_options):
        self.eps, self.gamma, self.rho = eps, gamma, rho
        self.M = M if M is not None else problem.lipschitz_hess
        self.eig_options = eig_options

    def __call__(self, oracle, x, seed, estimate=None):
        return hfo.hessian_descent(oracle, x, self.eps, self.gamma, self.M, self.rho, seed,
                                   estimate=estimate, **self.eig_options)


class CubicStrategy:
    accepts_estimate = False

    def __init__(self, problem, eps, gamma, rho, M=None, solver_step=1e-2, grad_tol=1e-3,
                 max_iters=10000, perturb=1e-6):
        self.eps, self.gamma = eps, gamma
        self.cfg = hfo.CubicSubproblemConfig(
            M if M is not None else problem.lipschitz_hess, solver_step, grad_tol,
            max_iters, perturb)

    def __call__(self, oracle, x, seed, estimate=None):
        return hfo.cubic_descent(oracle, x, self.eps, self.gamma, self.cfg, seed)


class ApproxCubicStrategy:
    accepts_estimate = False

    def __init__(self, problem, eps, gamma, rho, M=None, batch=None, solver_step=1e-2,
                 grad_tol=1e-3, max_iters=10000, perturb=1e-6, beta=0.9):
        self.batch = batch if batch is not None else max(1, problem.n // 10)
        self.cfg = hfo.CubicSubproblemConfig(
            M if M is not None else problem.lipschitz_hess, solver_step, grad_tol,
            max_iters, perturb)
        self.scale = hfo.DiagScaleState.zeros(problem.d, beta=beta)

    def __call__(self, oracle, x, seed, estimate=None):
        res, self.scale = hfo.approx_cubic_descent(oracle, x, self.batch, self.cfg.M,
                                                   self.scale, self.cfg, seed)
        return res


GFO_REGISTRY = {"svrg": SvrgStrategy, "gd": GdStrategy, "sgd": SgdStrategy,
                "adam": AdamStrategy}
HFO_REGISTRY = {"hessian-descent": HessianDescentStrategy, "cubic": CubicStrategy,
                "approx-cubic": ApproxCubicStrategy}


def make_gfo(name, problem, eps, params=None):
    try:
        cls = GFO_REGISTRY[name]
    except KeyError:
        raise ContractError(f"unknown GFO {name!r}; choose from {sorted(GFO_REGISTRY)}")
    return cls(problem, eps, **(params or {}))


def make_hfo(name, problem, eps, gamma, rho, params=None):
    try:
        cls = HFO_REGISTRY[name]
    except KeyError:
        raise ContractError(f"unknown HFO {name!r}; choose from {sorted(HFO_REGISTRY)}")
    return cls(problem, eps, gamma, rho, **(params or {}))


# ---------------------------------------------------------------------------
# parameter helpers


def gfo_rate(n, L, T_g):
    """Decrease-per-squared-gradient rate ``T_g / (40 L n^(2/3))`` of SVRG."""
    return T_g / (40.0 * L * n ** (2.0 / 3.0))


def hfo_rate(gamma, M, rho):
    """Guaranteed expected decrease ``rho gamma^3 / (24 M^2)`` of HessianDescent."""
    return rho * gamma**3 / (24.0 * M**2)


def default_p(n, eps, gamma, L, M, rho, T_g):
    """Mixing probability from ``1/p = 1/(eps^2 g) + 1/h``, clamped to [1e-6, 1-1e-6]."""
    for name, val in dict(n=n, eps=eps, gamma=gamma, L=L, M=M, rho=rho, T_g=T_g).items():
        if not val > 0:
            raise ContractError(f"{name} must be positive")
    first = eps**2 * gfo_rate(n, L, T_g)
    second = hfo_rate(gamma, M, rho)
    p = 1.0 / (1.0 / first + 1.0 / second)
    return min(max(p, 1e-6), 1 - 1e-6)


def theta(p, eps, g_val, h_val):
    """Per-iteration decrease ``min((1-p) eps^2 g, p h)`` when not yet critical."""
    if not 0 < p < 1:
        raise ContractError("p must lie in (0, 1)")
    return min((1 - p) * eps**2 * g_val, p * h_val)


def iteration_floor(delta, theta_val):
    """Smallest integer T with ``T > delta / theta``."""
    if not (delta >= 0 and theta_val > 0):
        raise ContractError("need delta >= 0 and theta > 0")
    return math.floor(delta / theta_val) + 1


def recommended_k(delta, T, theta_val, q, zeta):
    """Number of output samples so all miss with probability at most ``zeta``.

    ``ceil(log(1/zeta) / min(log(T theta / delta), log(1/q)))``, at least 1.
    Requires ``T theta > delta`` (see :func:`iteration_floor`).
    """
    if not (0 < zeta < 1 and 0 < q < 1 and delta > 0 and T > 0 and theta_val > 0):
        raise ContractError("need 0 < zeta, q < 1 and positive delta, T, theta")
    ratio = T * theta_val / delta
    if ratio <= 1:
        floor = iteration_floor(delta, theta_val)
        raise ContractError(f"T={T} is below the iteration floor {floor}")
    k = math.ceil(math.log(1 / zeta) / min(math.log(ratio), math.log(1 / q)))
    return max(1, k)


# ---------------------------------------------------------------------------
# driver


@dataclass
class MixConfig:
    T: int
    eps: float
    gamma: float | None = None
    p: float | None = None
    seed: int = 0
    gfo: str = "svrg"
    gfo_params: dict = field(default_factory=dict)
    hfo: str = "hessian-descent"
    hfo_params: dict = field(default_factory=dict)
    k: int = 1
    rho: float = 0.9
    # eigenvector-search options for the halt check (shift, max_iters, tol)
    check_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.T < 1 or self.k < 1:
            raise ContractError("T and k must be >= 1")
        if not self.eps > 0:
            raise ContractError("eps must be positive")
        if self.gamma is None:
            self.gamma = math.sqrt(self.eps)
        if not self.gamma > 0:
            raise ContractError("gamma must be positive")
        if self.p is not None and not 0 <= self.p <= 1:
            raise ContractError("p must lie in [0, 1]")
        if not 0 < self.rho < 1:
            raise ContractError("rho must lie in (0, 1)")

    def resolved_p(self, problem, gfo_strategy=None):
        if self.p is not None:
            return self.p
        L, M = problem.lipschitz_grad, problem.lipschitz_hess
        M = self.hfo_params.get("M") or M
        if isinstance(gfo_strategy, SvrgStrategy):
            T_g = gfo_strategy.base.total_inner_iters
        else:
            T_g = gfo.SvrgConfig.from_problem(problem, self.eps).total_inner_iters
        return default_p(problem.n, self.eps, self.gamma, L, M, self.rho, T_g)


@dataclass
class OuterStep:
    """What happened in one outer iteration; used for per-step assertions."""

    t: int
    chose_y: bool
    f_start: float
    f_u: float
    f_next: float | None
    halted: bool
    certificate: hfo.CurvatureEstimate | None
    guaranteed_decrease: float | None


@dataclass
class MixRunResult:
    output_set: list
    halted_early: bool
    samples: list
    trace: list
    final_x: np.ndarray
    steps: list
    p: float
    budget_exhausted: bool = False


def _row(oracle, t, inner, x, phase, min_eig=None):
    f, g = oracle.problem.mean_value_grad(x)
    c = oracle.counters
    return TraceRow(t, inner, c.wall_nanos, c.ifo_calls, c.iso_calls, float(f),
                    float(np.linalg.norm(g)), min_eig, phase)


def mix_run(oracle: Oracle, x0, cfg: MixConfig, budget: Budget | None = None) -> MixRunResult:
    """Run the alternating loop for up to ``cfg.T`` outer iterations.

    Halts early with output ``{u}`` when ``u`` passes
    :func:`hfo.check_second_order_critical`; otherwise the output set is the
    sequence of HFO outputs.  The budget is checked after every subroutine.
    """
    problem = oracle.problem
    gfo_step = make_gfo(cfg.gfo, problem, cfg.eps, cfg.gfo_params)
    hfo_step = make_hfo(cfg.hfo, problem, cfg.eps, cfg.gamma, cfg.rho, cfg.hfo_params)
    p = cfg.resolved_p(problem, gfo_step)
    mix_rng, gfo_rng, check_rng, hfo_rng = (substream(cfg.seed, s)
                                            for s in ("mix", "gfo", "check", "hfo"))
    budget = budget or Budget()

    x = np.array(x0, dtype=float)
    trace = [_row(oracle, 0, 0, x, "hfo")]
    outputs, steps = [], []
    halted = exhausted = False
    for t in range(1, cfg.T + 1):
        f_start = trace[-1].f
        res = gfo_step(oracle, x, _draw_seed(gfo_rng))
        chose_y = bool(mix_rng.random() < p)
        u = res.y if chose_y else res.z
        trace.append(_row(oracle, t, res.iterations, u, "gfo"))

        critical, cert = hfo.check_second_order_critical(
            oracle, u, cfg.eps, cfg.gamma, cfg.rho, _draw_seed(check_rng), **cfg.check_params)
        trace.append(_row(oracle, t, 0, u, "check",
                          None if cert is None else cert.rayleigh))
        if critical:
            outputs = [u]
            halted = True
            steps.append(OuterStep(t, chose_y, f_start, trace[-1].f, None, True, cert, None))
            break
        if budget.exhausted(oracle.counters):
            outputs.append(u)
            exhausted = True
            break

        same_search = getattr(hfo_step, "eig_options", None) == cfg.check_params
        estimate = cert if hfo_step.accepts_estimate and same_search else None
        step = hfo_step(oracle, u, _draw_seed(hfo_rng), estimate=estimate)
        x = step.y
        cert_out = step.certificate
        trace.append(_row(oracle, t, step.solver_iterations, x, "hfo",
                          None if cert_out is None else cert_out.rayleigh))
        steps.append(OuterStep(t, chose_y, f_start, trace[-2].f, trace[-1].f, False,
                               cert_out, step.guaranteed_decrease))
        if step.tau is hfo.Tau.HALT:
            outputs = [x]
            halted = True
            break
        outputs.append(x)
        if budget.exhausted(oracle.counters):
            exhausted = True
            break

    samples = sample_outputs(outputs, cfg.k, _draw_seed(substream(cfg.seed, "samples")))
    return MixRunResult(output_set=outputs, halted_early=halted, samples=samples, trace=trace,
                        final_x=outputs[-1], steps=steps, p=p, budget_exhausted=exhausted)


def sample_outputs(output_set, k, seed=0):
    """``k`` i.i.d. uniform draws ``(index, point)`` from ``output_set``."""
    if isinstance(output_set, MixRunResult):
        output_set = output_set.output_set
    if len(output_set) == 0:
        raise ContractError("cannot sample from an empty output set")
    if k < 1:
        raise ContractError("k must be >= 1")
    idx = np.random.default_rng(seed).integers(len(output_set), size=k)
    return [(int(i), output_set[int(i)]) for i in idx]
