"""Concrete finite-sum problems.

The main instance is the synthetic saddle problem

    f(x) = (1/n) sum_i  x^T A_i x + b_i^T x + sum_j x_j^10

whose origin is a non-degenerate saddle: the Hessian there is
``2 * mean(A_i)``, built to have one eigenvalue ``neg_eig`` and the rest in
``pos_range``.  The small analytic problems are fixtures for tests and for
the ``validate`` CLI command.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .oracle import ContractError, FiniteSumProblem, Oracle

FORMAT_NAME = "saddlemix-problem"
FORMAT_VERSION = 1

# Constants for the synthetic problem are computed on this box.
SYNTHETIC_BOX = 2.0


class SpectrumError(RuntimeError):
    """Generated synthetic instance failed its spectrum verification."""


class OutOfBoxWarning(RuntimeWarning):
    pass


def _ordered_sum(rows):
    acc = np.zeros(rows.shape[1:])
    for r in rows:
        acc = acc + r
    return acc


def random_orthogonal(d, rng):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def random_symmetric(shape, low, high, rng):
    """Symmetric matrices whose upper-triangle entries are uniform in [low, high]."""
    u = rng.uniform(low, high, size=shape)
    upper = np.triu(u)
    return upper + np.swapaxes(np.triu(u, 1), -1, -2)


class SyntheticSaddleProblem(FiniteSumProblem):
    """Quadratic-plus-tenth-power finite sum with a saddle at the origin."""

    name = "synthetic"

    def __init__(self, A, b, *, seed=None, neg_eig=-1e-3, pos_range=(1.0, 2.0),
                 perturb=0.1, b_scale=1e-3):
        A = np.ascontiguousarray(A, dtype=float)
        b = np.ascontiguousarray(b, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2] or b.shape != A.shape[:2]:
            raise ContractError("A must be (n, d, d) and b must be (n, d)")
        self.A = A
        self.b = b
        self.n, self.d = b.shape
        self.seed = seed
        self.neg_eig = float(neg_eig)
        self.pos_range = (float(pos_range[0]), float(pos_range[1]))
        self.perturb = perturb
        self.b_scale = b_scale
        # Full-batch oracles go through these; mathematically identical to
        # averaging the component oracles, accumulated in ascending index order.
        self.A_mean = _ordered_sum(A) / self.n
        self.b_mean = _ordered_sum(b) / self.n
        norms = np.abs(np.linalg.eigvalsh(A)).max(axis=1) if self.d <= 500 else \
            np.linalg.norm(A, axis=(1, 2))
        self.lipschitz_grad = float(2 * norms.max() + 90 * SYNTHETIC_BOX**8)
        self.lipschitz_hess = float(720 * SYNTHETIC_BOX**7)
        self.lower_bound_hint = None
        self._warned = False
        self._validate_attributes()

    # component oracles

    def value_grad(self, i, x):
        ax = self.A[i] @ x
        val = x @ ax + self.b[i] @ x + np.sum(x**10)
        return float(val), 2 * ax + self.b[i] + 10 * x**9

    def hvp(self, i, x, v):
        return 2 * (self.A[i] @ v) + 90 * x**8 * v

    def batch_value_grad(self, idx, x):
        ax = self.A[idx] @ x
        bi = self.b[idx]
        vals = ax @ x + bi @ x + np.sum(x**10)
        return vals, 2 * ax + bi + 10 * x**9

    def batch_hvp(self, idx, x, v):
        return 2 * (self.A[idx] @ v) + 90 * x**8 * v

    def mean_value_grad(self, x):
        ax = self.A_mean @ x
        val = x @ ax + self.b_mean @ x + np.sum(x**10)
        return float(val), 2 * ax + self.b_mean + 10 * x**9

    def mean_hvp(self, x, v):
        return 2 * (self.A_mean @ v) + 90 * x**8 * v

    def in_valid_region(self, x):
        ok = bool(np.max(np.abs(x)) <= SYNTHETIC_BOX)
        if not ok and not self._warned:
            warnings.warn(
                f"iterate left the box |x|_inf <= {SYNTHETIC_BOX}; recorded L and M "
                "no longer hold", OutOfBoxWarning, stacklevel=2)
            self._warned = True
        return ok

    def origin_hessian(self):
        return 2 * self.A_mean

    def state(self):
        header = dict(kind=self.name, n=self.n, d=self.d, seed=self.seed,
                      neg_eig=self.neg_eig, pos_range=list(self.pos_range),
                      perturb=self.perturb, b_scale=self.b_scale)
        return header, {"A": self.A, "b": self.b}

    @classmethod
    def from_state(cls, header, arrays):
        return cls(arrays["A"], arrays["b"], seed=header.get("seed"),
                   neg_eig=header["neg_eig"], pos_range=tuple(header["pos_range"]),
                   perturb=header.get("perturb", 0.1), b_scale=header.get("b_scale", 1e-3))


def generate_synthetic(n, d, seed, neg_eig=-1e-3, pos_range=(1.0, 2.0), *,
                       perturb=0.1, b_scale=1e-3, verify=True, max_attempts=5):
    """Draw a seeded synthetic saddle instance.

    The mean matrix is ``Q diag(neg_eig/2, mu_2/2, ...) Q^T`` with ``Q`` random
    orthogonal and ``mu_j ~ U(pos_range)``; each ``A_i`` adds a random
    symmetric perturbation with entries in ``[-perturb, perturb]``, the last
    one cancelling the rest.  ``b_i ~ b_scale * U(-1, 1)`` with ``b_n`` set to
    minus the running sum, so ``sum_i b_i`` is exactly zero in ascending
    order.  For ``d <= 200`` the origin Hessian spectrum is checked by a dense
    eigendecomposition; failures are retried with a fresh internal stream.
    """
    if n < 2 or d < 2:
        raise ContractError("synthetic problem needs n >= 2 and d >= 2")
    if not neg_eig < 0:
        raise ContractError("neg_eig must be negative")
    lo, hi = pos_range
    if not 0 < lo <= hi:
        raise ContractError("pos_range must be a positive interval")

    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        q = random_orthogonal(d, rng)
        spectrum = np.concatenate([[neg_eig], rng.uniform(lo, hi, d - 1)])
        a_bar = (q * (spectrum / 2)) @ q.T
        a_bar = (a_bar + a_bar.T) / 2

        A = np.empty((n, d, d))
        A[:-1] = random_symmetric((n - 1, d, d), -perturb, perturb, rng)
        A[-1] = -_ordered_sum(A[:-1])
        A += a_bar

        b = np.empty((n, d))
        b[:-1] = b_scale * rng.uniform(-1.0, 1.0, (n - 1, d))
        b[-1] = -_ordered_sum(b[:-1])

        problem = SyntheticSaddleProblem(A, b, seed=seed, neg_eig=neg_eig,
                                         pos_range=pos_range, perturb=perturb,
                                         b_scale=b_scale)
        if not verify or d > 200 or _spectrum_ok(problem):
            return problem
    raise SpectrumError(
        f"synthetic instance (n={n}, d={d}, seed={seed}) failed spectrum checks "
        f"after {max_attempts} attempts")


def _spectrum_ok(problem, tol=1e-9):
    eig = np.linalg.eigvalsh(problem.origin_hessian())
    lo, hi = problem.pos_range
    return (abs(eig[0] - problem.neg_eig) <= tol
            and eig[1] >= lo - tol and eig[-1] <= hi + tol)


def saddle_start(d, seed, radius=1e-4):
    """Seeded start point uniform in ``[-radius, radius]^d``."""
    return np.random.default_rng([seed, 7919]).uniform(-radius, radius, d)


# ---------------------------------------------------------------------------
# small analytic problems


class SeparableQuadratic(FiniteSumProblem):
    """``f_i(x) = 1/2 sum_j lam_ij x_j^2 + b_i^T x``.

    ``lam_ij = lam_j + delta_ij`` with ``delta_ij ~ spread * U(-1, 1)`` and the
    last row cancelling, so the mean curvature is exactly ``spectrum``.  The
    ``b_i`` sum to zero.  ``spread = b_scale = 0`` gives ``n`` identical
    components.  The Hessian is constant, so ``M`` is a free positive setting.
    """

    name = "quadratic"

    def __init__(self, spectrum, n=1, spread=0.0, b_scale=0.0, seed=0, M=1.0):
        spectrum = np.atleast_1d(np.asarray(spectrum, dtype=float))
        self.spectrum = spectrum
        self.n, self.d = int(n), spectrum.size
        self.spread, self.b_scale, self.seed = spread, b_scale, seed
        rng = np.random.default_rng([seed, 104729])
        lam = np.tile(spectrum, (self.n, 1))
        b = np.zeros((self.n, self.d))
        if self.n > 1:
            if spread:
                delta = spread * rng.uniform(-1.0, 1.0, (self.n - 1, self.d))
                lam[:-1] += delta
                lam[-1] -= _ordered_sum(delta)
            if b_scale:
                b[:-1] = b_scale * rng.uniform(-1.0, 1.0, (self.n - 1, self.d))
                b[-1] = -_ordered_sum(b[:-1])
        self.lam, self.b = lam, b
        self.lam_mean = _ordered_sum(lam) / self.n
        self.b_mean = _ordered_sum(b) / self.n
        self.lipschitz_grad = float(np.abs(lam).max())
        self.lipschitz_hess = float(M)
        self.lower_bound_hint = self._lower_bound()
        self._validate_attributes()

    def _lower_bound(self):
        if np.all(self.lam_mean > 0):
            return float(-0.5 * np.sum(self.b_mean**2 / self.lam_mean))
        return None

    def value_grad(self, i, x):
        g = self.lam[i] * x + self.b[i]
        return float(0.5 * np.sum(self.lam[i] * x * x) + self.b[i] @ x), g

    def hvp(self, i, x, v):
        return self.lam[i] * v

    def batch_value_grad(self, idx, x):
        lam, b = self.lam[idx], self.b[idx]
        return 0.5 * (lam * x * x).sum(axis=1) + b @ x, lam * x + b

    def batch_hvp(self, idx, x, v):
        return self.lam[idx] * v

    def mean_value_grad(self, x):
        g = self.lam_mean * x + self.b_mean
        return float(0.5 * np.sum(self.lam_mean * x * x) + self.b_mean @ x), g

    def mean_hvp(self, x, v):
        return self.lam_mean * v

    def state(self):
        return dict(kind=self.name, spectrum=self.spectrum.tolist(), n=self.n,
                    spread=self.spread, b_scale=self.b_scale, seed=self.seed,
                    M=self.lipschitz_hess), {}


class Saddle2D(FiniteSumProblem):
    """``1/2 (x_1^2 - x_2^2)`` as ``n`` identical components.

    The true Hessian Lipschitz constant is 0; ``M`` is a positive setting.
    """

    name = "saddle2d"

    def __init__(self, n=1, M=1.0):
        self.n, self.d = int(n), 2
        self.lipschitz_grad = 1.0
        self.lipschitz_hess = float(M)
        self._diag = np.array([1.0, -1.0])
        self._validate_attributes()

    def value_grad(self, i, x):
        return float(0.5 * (x[0] ** 2 - x[1] ** 2)), self._diag * x

    def hvp(self, i, x, v):
        return self._diag * v

    def mean_value_grad(self, x):
        return self.value_grad(0, x)

    def mean_hvp(self, x, v):
        return self._diag * v

    def state(self):
        return dict(kind=self.name, n=self.n, M=self.lipschitz_hess), {}


class Quartic(FiniteSumProblem):
    """``sum_j x_j^4`` as ``n`` identical components.

    ``L = 12 R^2`` and ``M = 24 R`` hold on the box ``|x|_inf <= R``.
    """

    name = "quartic"

    def __init__(self, d=2, n=1, radius=1.0):
        self.n, self.d = int(n), int(d)
        self.radius = float(radius)
        self.lipschitz_grad = 12 * self.radius**2
        self.lipschitz_hess = 24 * self.radius
        self.lower_bound_hint = 0.0
        self._validate_attributes()

    def value_grad(self, i, x):
        return float(np.sum(x**4)), 4 * x**3

    def hvp(self, i, x, v):
        return 12 * x**2 * v

    def mean_value_grad(self, x):
        return self.value_grad(0, x)

    def mean_hvp(self, x, v):
        return 12 * x**2 * v

    def in_valid_region(self, x):
        return bool(np.max(np.abs(x)) <= self.radius)

    def state(self):
        return dict(kind=self.name, d=self.d, n=self.n, radius=self.radius), {}


class QuarticSaddle(FiniteSumProblem):
    """``1/2 sum_j c_j x_j^2 + sum_j x_j^4`` as ``n`` identical components.

    With a negative entry in ``curvature`` the origin is a strict saddle, and
    unlike the quadratic toys the Hessian genuinely varies: ``M = 24 R`` and
    ``L = max|c| + 12 R^2`` hold on the box ``|x|_inf <= R``.
    """

    name = "quartic-saddle"

    def __init__(self, curvature, n=1, radius=1.0):
        self.curvature = np.atleast_1d(np.asarray(curvature, dtype=float))
        self.n, self.d = int(n), self.curvature.size
        self.radius = float(radius)
        self.lipschitz_grad = float(np.abs(self.curvature).max() + 12 * self.radius**2)
        self.lipschitz_hess = 24 * self.radius
        neg = np.minimum(self.curvature, 0.0)
        self.lower_bound_hint = float(-np.sum(neg**2) / 16)
        self._validate_attributes()

    def value_grad(self, i, x):
        c = self.curvature
        return float(0.5 * np.sum(c * x * x) + np.sum(x**4)), c * x + 4 * x**3

    def hvp(self, i, x, v):
        return (self.curvature + 12 * x**2) * v

    def mean_value_grad(self, x):
        return self.value_grad(0, x)

    def mean_hvp(self, x, v):
        return self.hvp(0, x, v)

    def in_valid_region(self, x):
        return bool(np.max(np.abs(x)) <= self.radius)

    def state(self):
        return dict(kind=self.name, curvature=self.curvature.tolist(), n=self.n,
                    radius=self.radius), {}


class DenseQuadratic(FiniteSumProblem):
    """``1/2 x^T H x`` for a given symmetric ``H``, as ``n`` identical components."""

    name = "dense-quadratic"

    def __init__(self, H, n=1, M=1.0):
        H = np.asarray(H, dtype=float)
        if H.ndim != 2 or H.shape[0] != H.shape[1] or not np.allclose(H, H.T):
            raise ContractError("H must be a symmetric square matrix")
        self.H = H
        self.n, self.d = int(n), H.shape[0]
        self.lipschitz_grad = float(max(np.abs(np.linalg.eigvalsh(H)).max(), 1e-12))
        self.lipschitz_hess = float(M)
        self._validate_attributes()

    def value_grad(self, i, x):
        hx = self.H @ x
        return float(0.5 * x @ hx), hx

    def hvp(self, i, x, v):
        return self.H @ v

    def mean_value_grad(self, x):
        return self.value_grad(0, x)

    def mean_hvp(self, x, v):
        return self.H @ v

    def state(self):
        return dict(kind=self.name, n=self.n, M=self.lipschitz_hess), {"H": self.H}


def toy_problems(d=3, n=4):
    """Catalogue of small analytic fixtures, keyed by name."""
    return {
        "quadratic": SeparableQuadratic(np.linspace(1.0, 2.0, d), n=n, spread=0.5,
                                        b_scale=0.1, seed=0),
        "saddle2d": Saddle2D(n=n),
        "quartic": Quartic(d=d, n=n, radius=1.0),
    }


def shipped_problems(seed=0):
    """Every problem the library ships, at test-friendly sizes."""
    probs = dict(toy_problems())
    probs["quartic-saddle"] = QuarticSaddle([-1.0, 0.5, 1.0], n=4)
    probs["synthetic"] = generate_synthetic(20, 8, seed)
    return probs


# ---------------------------------------------------------------------------
# dense Hessian assembly (small d only)


@dataclass
class DenseHessianOracle:
    h_matrix: np.ndarray

    def eigvalsh(self):
        return np.linalg.eigvalsh(self.h_matrix)

    @property
    def lambda_min(self):
        return float(self.eigvalsh()[0])


def dense_hessian(oracle: Oracle, x, max_dim=500) -> DenseHessianOracle:
    """Assemble ``grad^2 f(x)`` column by column; costs ``n * d`` ISO calls."""
    d = oracle.d
    if d > max_dim:
        raise ContractError(f"dense Hessian refused for d={d} > {max_dim}")
    x = np.asarray(x, dtype=float)
    H = np.empty((d, d))
    e = np.zeros(d)
    for j in range(d):
        e[j] = 1.0
        H[:, j] = oracle.full_hvp(x, e)
        e[j] = 0.0
    asym = np.abs(H - H.T).max()
    if asym > 1e-10 * max(1.0, np.abs(H).max()):
        raise ArithmeticError(f"assembled Hessian is not symmetric (max asymmetry {asym:g})")
    return DenseHessianOracle(0.5 * (H + H.T))


# ---------------------------------------------------------------------------
# serialization


_KINDS = {
    "synthetic": lambda h, a: SyntheticSaddleProblem.from_state(h, a),
    "quadratic": lambda h, a: SeparableQuadratic(h["spectrum"], n=h["n"], spread=h["spread"],
                                                 b_scale=h["b_scale"], seed=h["seed"], M=h["M"]),
    "saddle2d": lambda h, a: Saddle2D(n=h["n"], M=h["M"]),
    "quartic": lambda h, a: Quartic(d=h["d"], n=h["n"], radius=h["radius"]),
    "quartic-saddle": lambda h, a: QuarticSaddle(h["curvature"], n=h["n"], radius=h["radius"]),
    "dense-quadratic": lambda h, a: DenseQuadratic(a["H"], n=h["n"], M=h["M"]),
}


def save_problem(problem, path):
    """Write ``problem`` as an ``.npz`` archive with a versioned JSON header."""
    header, arrays = problem.state()
    header = dict(format=FORMAT_NAME, version=FORMAT_VERSION, **header)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_problem(path):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        arrays = {k: data[k] for k in data.files if k != "header"}
    if header.get("format") != FORMAT_NAME:
        raise ContractError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported format version {header.get('version')}")
    try:
        build = _KINDS[header["kind"]]
    except KeyError:
        raise ContractError(f"{path}: unknown problem kind {header.get('kind')!r}") from None
    return build(header, arrays)
