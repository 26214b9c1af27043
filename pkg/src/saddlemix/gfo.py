"""Gradient-focused optimizers: SVRG plus GD, SGD and Adam baselines.

Each returns a :class:`GfoResult` ``(y, z)`` where ``y`` is an inner iterate
drawn uniformly at random (reservoir sampling, O(d) memory) and ``z`` is the
final iterate.  Objective values stored in results and traces are
diagnostics evaluated on the problem directly and are not charged to the
oracle counters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .oracle import ContractError, NumericError, Oracle, OracleCounters


@dataclass
class TracePoint:
    iteration: int
    f: float
    grad_norm: float
    counters: OracleCounters


@dataclass
class GfoResult:
    y: np.ndarray
    z: np.ndarray
    f_y: float
    f_z: float
    trace: list[TracePoint] = field(default_factory=list)
    iterations: int = 0


@dataclass
class SvrgConfig:
    epoch_len: int
    step_size: float
    total_inner_iters: int
    seed: int = 0
    batch: int = 1

    def __post_init__(self):
        if self.epoch_len < 1 or self.total_inner_iters < 1 or self.batch < 1:
            raise ContractError("epoch_len, total_inner_iters and batch must be >= 1")
        if not self.step_size > 0:
            raise ContractError("step_size must be positive")

    @property
    def epochs(self):
        return math.ceil(self.total_inner_iters / self.epoch_len)

    @classmethod
    def from_problem(cls, problem, eps, seed=0, **overrides):
        """Defaults from the analysis: ``m = n``, ``eta = 1/(4 L n^(2/3))``,
        ``T_g = 40 L n^(2/3) / sqrt(eps)`` rounded up."""
        n, L = problem.n, problem.lipschitz_grad
        n23 = n ** (2.0 / 3.0)
        params = dict(epoch_len=n, step_size=1.0 / (4 * L * n23),
                      total_inner_iters=math.ceil(40 * L * n23 / math.sqrt(eps)), seed=seed)
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**params)


class _Reservoir:
    """Uniform sample of one item from a stream of unknown length."""

    def __init__(self, rng):
        self.rng = rng
        self.count = 0
        self.item = None

    def offer(self, x):
        self.count += 1
        if self.count == 1 or self.rng.integers(self.count) == 0:
            self.item = x.copy()


def _rngs(seed, k=2):
    return np.random.default_rng(seed).spawn(k)


class _Tracer:
    def __init__(self, oracle, every):
        self.oracle = oracle
        self.every = every
        self.points = []

    def maybe(self, it, x, force=False):
        if force or (self.every and it % self.every == 0):
            self.record(it, x)

    def record(self, it, x):
        problem = self.oracle.problem
        f, g = problem.mean_value_grad(x)
        problem.in_valid_region(x)
        self.points.append(TracePoint(it, float(f), float(np.linalg.norm(g)),
                                      self.oracle.counters))


def _finish(oracle, y, z, tracer, iters):
    problem = oracle.problem
    if tracer.points and tracer.points[-1].iteration == iters:
        f_z = tracer.points[-1].f
    else:
        tracer.record(iters, z)
        f_z = tracer.points[-1].f
    f_y = float(problem.mean_value(y))
    return GfoResult(y=y, z=z, f_y=f_y, f_z=f_z, trace=tracer.points, iterations=iters)


def _check_finite(x, it):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite iterate at iteration {it}", iteration=it)


def _tagged(exc, it):
    if exc.iteration is None:
        exc.iteration = it
    return exc


def variance_reduced_grad(oracle: Oracle, idx, x, snapshot, snapshot_grad):
    """``mean_{i in idx} [grad f_i(x) - grad f_i(snapshot)] + snapshot_grad``.

    Costs ``2 * len(idx)`` IFO calls.
    """
    if len(idx) == 1:
        i = int(idx[0])
        return oracle.ifo(i, x)[1] - oracle.ifo(i, snapshot)[1] + snapshot_grad
    return oracle.minibatch_grad(idx, x)[1] - oracle.minibatch_grad(idx, snapshot)[1] \
        + snapshot_grad


def svrg_run(oracle: Oracle, x0, cfg: SvrgConfig, trace_every=None) -> GfoResult:
    """Nonconvex SVRG.

    Runs ``S = ceil(T_g / m)`` epochs; each takes one snapshot full gradient
    (``n`` IFO calls) and then up to ``m`` variance-reduced steps, for
    ``T_g`` inner steps in total (the last epoch is truncated).  With the
    default batch of one, a run costs ``S*n + 2*T_g`` IFO calls.
    """
    n = oracle.n
    idx_rng, pick_rng = _rngs(cfg.seed)
    reservoir = _Reservoir(pick_rng)
    tracer = _Tracer(oracle, trace_every)
    x = np.array(x0, dtype=float)
    it = 0
    tracer.maybe(0, x, force=bool(trace_every))
    try:
        for s in range(cfg.epochs):
            snapshot = x.copy()
            _, g_snap = oracle.full_grad(snapshot)
            for _ in range(min(cfg.epoch_len, cfg.total_inner_iters - it)):
                reservoir.offer(x)
                idx = idx_rng.integers(n, size=cfg.batch)
                v = variance_reduced_grad(oracle, idx, x, snapshot, g_snap)
                x = x - cfg.step_size * v
                it += 1
                _check_finite(x, it)
                tracer.maybe(it, x)
    except NumericError as exc:
        raise _tagged(exc, it + 1)
    return _finish(oracle, reservoir.item, x, tracer, it)


def gd_run(oracle: Oracle, x0, step, iters, seed=0, trace_every=None) -> GfoResult:
    """Full-batch gradient descent; ``n`` IFO calls per iteration."""
    if not step > 0:
        raise ContractError("step must be positive")
    if iters < 1:
        raise ContractError("iters must be >= 1")
    reservoir = _Reservoir(np.random.default_rng(seed))
    tracer = _Tracer(oracle, trace_every)
    x = np.array(x0, dtype=float)
    tracer.maybe(0, x, force=bool(trace_every))
    t = 0
    try:
        for t in range(iters):
            reservoir.offer(x)
            _, g = oracle.full_grad(x)
            x = x - step * g
            _check_finite(x, t + 1)
            tracer.maybe(t + 1, x)
    except NumericError as exc:
        raise _tagged(exc, t + 1)
    return _finish(oracle, reservoir.item, x, tracer, iters)


def _minibatch(oracle, rng, batch, x):
    if batch == oracle.n:
        return oracle.full_grad(x)[1]
    idx = rng.integers(oracle.n, size=batch)
    if batch == 1:
        return oracle.ifo(int(idx[0]), x)[1]
    return oracle.minibatch_grad(idx, x)[1]


def sgd_run(oracle: Oracle, x0, step, batch, iters, seed=0, trace_every=None) -> GfoResult:
    """Minibatch SGD with indices drawn uniformly with replacement.

    ``batch == n`` is a deterministic full pass, identical to GD.
    """
    if not 1 <= batch <= oracle.n:
        raise ContractError(f"batch must be in [1, {oracle.n}]")
    if not step > 0:
        raise ContractError("step must be positive")
    idx_rng, pick_rng = _rngs(seed)
    reservoir = _Reservoir(pick_rng)
    tracer = _Tracer(oracle, trace_every)
    x = np.array(x0, dtype=float)
    tracer.maybe(0, x, force=bool(trace_every))
    t = 0
    try:
        for t in range(iters):
            reservoir.offer(x)
            x = x - step * _minibatch(oracle, idx_rng, batch, x)
            _check_finite(x, t + 1)
            tracer.maybe(t + 1, x)
    except NumericError as exc:
        raise _tagged(exc, t + 1)
    return _finish(oracle, reservoir.item, x, tracer, iters)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_run(oracle: Oracle, x0, alpha, eps=1e-8, beta1=0.9, beta2=0.999, batch=1,
             iters=1, seed=0, trace_every=None, state: AdamState | None = None) -> GfoResult:
    """Bias-corrected Adam on minibatch gradients.

    Passing ``state`` continues the moment estimates across calls (it is
    updated in place).
    """
    if not (alpha > 0 and eps > 0):
        raise ContractError("alpha and eps must be positive")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ContractError("beta1 and beta2 must lie in [0, 1)")
    if not 1 <= batch <= oracle.n:
        raise ContractError(f"batch must be in [1, {oracle.n}]")
    idx_rng, pick_rng = _rngs(seed)
    reservoir = _Reservoir(pick_rng)
    tracer = _Tracer(oracle, trace_every)
    x = np.array(x0, dtype=float)
    if state is None:
        state = AdamState(np.zeros_like(x), np.zeros_like(x))
    tracer.maybe(0, x, force=bool(trace_every))
    k = 0
    try:
        for k in range(iters):
            reservoir.offer(x)
            g = _minibatch(oracle, idx_rng, batch, x)
            state.t += 1
            state.m = beta1 * state.m + (1 - beta1) * g
            state.v = beta2 * state.v + (1 - beta2) * g * g
            m_hat = state.m / (1 - beta1**state.t)
            v_hat = state.v / (1 - beta2**state.t)
            x = x - alpha * m_hat / (np.sqrt(v_hat) + eps)
            _check_finite(x, k + 1)
            tracer.maybe(k + 1, x)
    except NumericError as exc:
        raise _tagged(exc, k + 1)
    return _finish(oracle, reservoir.item, x, tracer, iters)
