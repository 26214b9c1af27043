"""Finite-sum problems and counted first/second-order oracles.

A problem is ``f(x) = (1/n) sum_i f_i(x)``.  Optimizers never touch the
problem directly; they go through an :class:`Oracle`, which owns the call
counters for one run.  One IFO call is one component ``(f_i(x), grad f_i(x))``
and one ISO call is one component Hessian-vector product, so a full-batch
gradient costs ``n`` IFO calls and a full-batch HVP costs ``n`` ISO calls.

Component indices are 0-based.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class NumericError(ArithmeticError):
    """An oracle or iterate produced a non-finite value."""

    def __init__(self, message, index=None, iteration=None):
        super().__init__(message)
        self.index = index
        self.iteration = iteration


class FiniteSumProblem:
    """Base class for ``f = mean_i f_i`` with analytic component oracles.

    Subclasses implement :meth:`value_grad` and :meth:`hvp`.  The batched and
    full-sum methods have generic implementations that subclasses may
    override with faster, mathematically identical paths.
    """

    n: int
    d: int
    lipschitz_grad: float
    lipschitz_hess: float
    lower_bound_hint: float | None = None
    name = "problem"

    def _validate_attributes(self):
        if self.n < 1 or self.d < 1:
            raise ContractError(f"need n >= 1 and d >= 1, got n={self.n}, d={self.d}")
        if not (self.lipschitz_grad > 0 and self.lipschitz_hess > 0):
            raise ContractError("Lipschitz constants L and M must be positive")

    # component oracles -------------------------------------------------

    def value_grad(self, i: int, x: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def hvp(self, i: int, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # batched oracles; rows follow the order of ``idx`` ---------------

    def batch_value_grad(self, idx, x):
        out = [self.value_grad(int(i), x) for i in idx]
        vals = np.array([o[0] for o in out], dtype=float)
        grads = np.array([o[1] for o in out], dtype=float).reshape(len(out), self.d)
        return vals, grads

    def batch_hvp(self, idx, x, v):
        return np.array([self.hvp(int(i), x, v) for i in idx], dtype=float).reshape(
            len(idx), self.d
        )

    # full-sum oracles --------------------------------------------------

    def mean_value_grad(self, x):
        vals, grads = self.batch_value_grad(range(self.n), x)
        return ordered_mean(vals), ordered_mean(grads)

    def mean_hvp(self, x, v):
        return ordered_mean(self.batch_hvp(range(self.n), x, v))

    def mean_value(self, x):
        return self.mean_value_grad(x)[0]

    def in_valid_region(self, x) -> bool:
        """Whether the recorded L and M are valid at ``x``."""
        return True


def ordered_mean(rows):
    """Mean over axis 0, accumulated strictly in ascending row order."""
    rows = np.asarray(rows, dtype=float)
    acc = np.zeros(rows.shape[1:]) if rows.ndim > 1 else 0.0
    for r in rows:
        acc = acc + r
    return acc / len(rows)


@dataclass(frozen=True)
class OracleCounters:
    ifo_calls: int = 0
    iso_calls: int = 0
    wall_nanos: int = 0


@dataclass
class Budget:
    """Resource limits checked between subroutine invocations."""

    max_ifo: int | None = None
    max_iso: int | None = None
    max_wall_seconds: float | None = None

    def exhausted(self, counters: OracleCounters) -> bool:
        if self.max_ifo is not None and counters.ifo_calls >= self.max_ifo:
            return True
        if self.max_iso is not None and counters.iso_calls >= self.max_iso:
            return True
        if (
            self.max_wall_seconds is not None
            and counters.wall_nanos >= self.max_wall_seconds * 1e9
        ):
            return True
        return False


class Oracle:
    """Counted access to a problem's IFO and ISO for a single run.

    Every optimizer in the library routes its oracle calls through one of
    these.  Counter updates are guarded by a lock so concurrent evaluations
    from worker threads tally correctly.
    """

    def __init__(self, problem: FiniteSumProblem):
        self.problem = problem
        self._ifo = 0
        self._iso = 0
        self._lock = threading.Lock()
        self._t0 = time.perf_counter_ns()

    @property
    def n(self):
        return self.problem.n

    @property
    def d(self):
        return self.problem.d

    @property
    def counters(self) -> OracleCounters:
        with self._lock:
            return OracleCounters(self._ifo, self._iso, time.perf_counter_ns() - self._t0)

    def _charge(self, ifo=0, iso=0):
        with self._lock:
            self._ifo += ifo
            self._iso += iso

    def _check_index(self, i):
        if not 0 <= i < self.problem.n:
            raise ContractError(f"component index {i} outside [0, {self.problem.n})")

    def _check_vec(self, x, what="x"):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.problem.d,):
            raise ContractError(f"{what} has shape {x.shape}, expected ({self.problem.d},)")
        return x

    def ifo(self, i: int, x) -> tuple[float, np.ndarray]:
        self._check_index(i)
        x = self._check_vec(x)
        self._charge(ifo=1)
        val, g = self.problem.value_grad(i, x)
        if not (np.isfinite(val) and np.all(np.isfinite(g))):
            raise NumericError(f"non-finite IFO output for component {i}", index=i)
        return float(val), g

    def iso(self, i: int, x, v) -> np.ndarray:
        self._check_index(i)
        x = self._check_vec(x)
        v = self._check_vec(v, "v")
        self._charge(iso=1)
        hv = self.problem.hvp(i, x, v)
        if not np.all(np.isfinite(hv)):
            raise NumericError(f"non-finite ISO output for component {i}", index=i)
        return hv

    def batch_ifo(self, idx, x):
        """Per-index values and gradients; costs ``len(idx)`` IFO calls."""
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.problem.n):
            raise ContractError("component index out of range in batch")
        x = self._check_vec(x)
        self._charge(ifo=len(idx))
        vals, grads = self.problem.batch_value_grad(idx, x)
        _raise_nonfinite_rows(idx, vals, grads, "IFO")
        return vals, grads

    def batch_iso(self, idx, x, v):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.problem.n):
            raise ContractError("component index out of range in batch")
        x = self._check_vec(x)
        v = self._check_vec(v, "v")
        self._charge(iso=len(idx))
        hv = self.problem.batch_hvp(idx, x, v)
        _raise_nonfinite_rows(idx, None, hv, "ISO")
        return hv

    def minibatch_grad(self, idx, x):
        """Mean value and gradient over ``idx``; costs ``len(idx)`` IFO calls."""
        vals, grads = self.batch_ifo(idx, x)
        return float(ordered_mean(vals)), ordered_mean(grads)

    def minibatch_hvp(self, idx, x, v):
        return ordered_mean(self.batch_iso(idx, x, v))

    def full_grad(self, x) -> tuple[float, np.ndarray]:
        """``(f(x), grad f(x))``; costs exactly ``n`` IFO calls."""
        x = self._check_vec(x)
        self._charge(ifo=self.problem.n)
        val, g = self.problem.mean_value_grad(x)
        if not (np.isfinite(val) and np.all(np.isfinite(g))):
            _locate_nonfinite(self.problem, x)
        return float(val), g

    def full_value(self, x) -> float:
        """``f(x)``; costs exactly ``n`` IFO calls."""
        x = self._check_vec(x)
        self._charge(ifo=self.problem.n)
        val = self.problem.mean_value(x)
        if not np.isfinite(val):
            _locate_nonfinite(self.problem, x)
        return float(val)

    def full_hvp(self, x, v) -> np.ndarray:
        """``grad^2 f(x) v``; costs exactly ``n`` ISO calls."""
        x = self._check_vec(x)
        v = self._check_vec(v, "v")
        self._charge(iso=self.problem.n)
        hv = self.problem.mean_hvp(x, v)
        if not np.all(np.isfinite(hv)):
            _locate_nonfinite(self.problem, x, v)
        return hv


def _raise_nonfinite_rows(idx, vals, rows, kind):
    bad = ~np.all(np.isfinite(rows), axis=1)
    if vals is not None:
        bad |= ~np.isfinite(vals)
    if bad.any():
        i = int(idx[np.argmax(bad)])
        raise NumericError(f"non-finite {kind} output for component {i}", index=i)


def _locate_nonfinite(problem, x, v=None):
    for i in range(problem.n):
        out = problem.hvp(i, x, v) if v is not None else problem.value_grad(i, x)[1]
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite oracle output for component {i}", index=i)
    raise NumericError("non-finite full-batch oracle output")


def check_hvp(oracle: Oracle, x, v, h=None) -> float:
    """Relative error of ``full_hvp`` against central differences of ``full_grad``.

    The default step is ``1e-5 * max(1, |x|) / |v|``.  Calls are charged to
    ``oracle`` like any others.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    vnorm = np.linalg.norm(v)
    if vnorm == 0:
        raise ContractError("check_hvp needs a nonzero direction")
    if h is None:
        h = 1e-5 * max(1.0, np.linalg.norm(x)) / vnorm
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    hv = oracle.full_hvp(x, v)
    _, gp = oracle.full_grad(x + h * v)
    _, gm = oracle.full_grad(x - h * v)
    fd = (gp - gm) / (2 * h)
    return float(np.linalg.norm(hv - fd) / max(1.0, np.linalg.norm(fd)))
