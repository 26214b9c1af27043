"""Experiment runner behind the ``saddlemix`` CLI.

A :class:`RunConfig` is a flat set of keys with recorded defaults.  Config
files hold ``key = value`` lines (``#`` starts a comment); keys written as
``method.key`` apply only when that method runs inside ``compare``.  The
fully resolved config is echoed into each trace header as ``# config.key=value``
lines, and :func:`load_config` accepts a trace file too, so any run can be
replayed from its artifact.
"""

import dataclasses
import itertools
import json
import logging
import math
import typing
from dataclasses import dataclass, field

import numpy as np

from . import __version__, framework, problems
from .oracle import Budget, ContractError, NumericError, Oracle
from .trace import TraceRow, write_text_atomic, write_trace

log = logging.getLogger(__name__)

METHODS = ("sgd", "gd", "adam", "svrg", "cubic", "approx-cubic", "mix")
PROBLEM_KINDS = ("synthetic", "quadratic", "saddle2d", "quartic", "file")


@dataclass
class RunConfig:
    """Defaults are the tuned desk-scale synthetic experiment.

    The recorded Lipschitz constants of the synthetic problem hold on the
    whole box ``|x|_inf <= 2`` and are far too pessimistic for step rules,
    so the defaults override the step size, inner iterations, ``M``, ``p``
    and the eigenvector-search shift.  Set a key to ``none`` to fall back
    to the analysis default.
    """

    # problem
    problem: str = "synthetic"
    problem_path: str = ""
    n: int = 1000
    d: int = 100
    problem_seed: int = 0
    neg_eig: float = -1e-3
    pos_low: float = 1.0
    pos_high: float = 2.0
    start: str = "saddle"
    start_radius: float = 1e-4
    # optimizer stack
    method: str = "mix"
    gfo: str = "svrg"
    hfo: str = "hessian-descent"
    eps: float = 1e-3
    gamma: typing.Optional[float] = None
    p: typing.Optional[float] = 0.5
    rho: float = 0.9
    M: typing.Optional[float] = 1e-3
    T: int = 20
    k: int = 1
    # gradient-focused parameters; None picks the method's default
    step: typing.Optional[float] = 0.05
    batch: int = 1
    gfo_iters: typing.Optional[int] = 1000
    epoch_len: typing.Optional[int] = None
    adam_alpha: float = 1e-3
    adam_eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    # Hessian-focused parameters
    solver_step: float = 1e-2
    solver_tol: float = 1e-3
    solver_max_iters: int = 10000
    perturb: float = 1e-6
    approx_batch: typing.Optional[int] = None
    eig_shift: str = "auto"
    eig_max_iters: int = 20000
    eig_tol: typing.Optional[float] = 1e-4
    # budgets; None means unlimited
    max_ifo: typing.Optional[int] = None
    max_iso: typing.Optional[int] = None
    max_wall: typing.Optional[float] = None
    budget_fatal: bool = False
    # output
    seed: int = 0
    output: str = "trace.csv"
    summary: str = ""
    timing: str = "header"
    overrides: dict = field(default_factory=dict, repr=False)

    def validate(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.problem not in PROBLEM_KINDS:
            raise ContractError(f"unknown problem {self.problem!r}; choose from {PROBLEM_KINDS}")
        if self.problem == "file" and not self.problem_path:
            raise ContractError("problem=file needs problem_path")
        if self.start not in ("saddle", "zero"):
            raise ContractError("start must be 'saddle' or 'zero'")
        if self.timing not in ("header", "rows"):
            raise ContractError("timing must be 'header' or 'rows'")
        if self.T < 1:
            raise ContractError("T must be >= 1")
        if not self.eps > 0:
            raise ContractError("eps must be positive")
        return self

    def resolved(self):
        """Flat dict of every public key, the form echoed into outputs."""
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if f.name != "overrides"}

    def for_method(self, method):
        """Copy with ``method`` set and its namespaced overrides applied."""
        values = dict(self.resolved(), method=method)
        values.update(self.overrides.get(method, {}))
        return RunConfig(**values, overrides=self.overrides)


_HINTS = typing.get_type_hints(RunConfig)


def _coerce(key, text):
    if key not in _HINTS or key == "overrides":
        raise ContractError(f"unknown config key {key!r}")
    hint = _HINTS[key]
    optional = type(None) in typing.get_args(hint)
    base = next((a for a in typing.get_args(hint) if a is not type(None)), hint)
    text = text.strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if base is bool:
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
        if base is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        return base(text)
    except ValueError:
        raise ContractError(f"bad value {text!r} for {key} (expected {base.__name__})") from None


def apply_settings(cfg: RunConfig, pairs) -> RunConfig:
    """Apply ``(key, text)`` pairs; ``method.key`` pairs become overrides."""
    values = cfg.resolved()
    overrides = {m: dict(v) for m, v in cfg.overrides.items()}
    for key, text in pairs:
        key = key.strip()
        method, dot, sub = key.partition(".")
        if dot:
            if method not in METHODS:
                raise ContractError(f"override prefix {method!r} is not a method")
            overrides.setdefault(method, {})[sub] = _coerce(sub, text)
        else:
            values[key] = _coerce(key, text)
    return RunConfig(**values, overrides=overrides)


def parse_setting(text):
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ContractError(f"expected key=value, got {text!r}")
    return key.strip(), value


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Read a flat config file, or the ``# config.`` header of a trace file."""
    pairs = []
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ContractError(f"cannot read config {path}: {exc}") from None
    from_trace = any(line.startswith("# config.") for line in lines)
    for line in lines:
        if from_trace:
            if line.startswith("# config."):
                pairs.append(parse_setting(line[len("# config."):]))
            continue
        line = line.split("#", 1)[0].strip()
        if line:
            pairs.append(parse_setting(line))
    return apply_settings(base or RunConfig(), pairs)


# ---------------------------------------------------------------------------
# problem and stack construction


def build_problem(cfg: RunConfig):
    if cfg.problem == "file":
        return problems.load_problem(cfg.problem_path)
    if cfg.problem == "synthetic":
        return problems.generate_synthetic(cfg.n, cfg.d, cfg.problem_seed, cfg.neg_eig,
                                           (cfg.pos_low, cfg.pos_high))
    if cfg.problem == "quadratic":
        return problems.SeparableQuadratic(np.linspace(cfg.pos_low, cfg.pos_high, cfg.d),
                                           n=cfg.n, spread=0.5, b_scale=0.1,
                                           seed=cfg.problem_seed)
    if cfg.problem == "saddle2d":
        return problems.Saddle2D(n=cfg.n)
    return problems.Quartic(d=cfg.d, n=cfg.n)


def start_point(cfg: RunConfig, problem):
    if cfg.start == "zero":
        return np.zeros(problem.d)
    return problems.saddle_start(problem.d, cfg.problem_seed, cfg.start_radius)


def _drop_none(d):
    return {k: v for k, v in d.items() if v is not None}


def gfo_params(cfg: RunConfig, name):
    if name == "svrg":
        return _drop_none(dict(step_size=cfg.step, epoch_len=cfg.epoch_len,
                               total_inner_iters=cfg.gfo_iters, batch=cfg.batch))
    if name == "gd":
        return _drop_none(dict(step=cfg.step, iters=cfg.gfo_iters))
    if name == "sgd":
        return _drop_none(dict(step=cfg.step, batch=cfg.batch, iters=cfg.gfo_iters))
    return _drop_none(dict(alpha=cfg.adam_alpha, adam_eps=cfg.adam_eps, beta1=cfg.beta1,
                           beta2=cfg.beta2, batch=cfg.batch, iters=cfg.gfo_iters))


def eig_options(cfg: RunConfig):
    opts = dict(max_iters=cfg.eig_max_iters)
    if cfg.eig_shift == "auto":
        opts["shift"] = "auto"
    elif cfg.eig_shift != "L":
        try:
            opts["shift"] = float(cfg.eig_shift)
        except ValueError:
            raise ContractError(f"eig_shift must be 'L', 'auto' or a number, "
                                f"got {cfg.eig_shift!r}") from None
    if cfg.eig_tol is not None:
        opts["tol"] = cfg.eig_tol
    return opts


def hfo_params(cfg: RunConfig, name):
    if name == "hessian-descent":
        return dict(M=cfg.M, **eig_options(cfg))
    solver = dict(M=cfg.M, solver_step=cfg.solver_step, grad_tol=cfg.solver_tol,
                  max_iters=cfg.solver_max_iters, perturb=cfg.perturb)
    if name == "approx-cubic":
        solver["batch"] = cfg.approx_batch
    return solver


def mix_config(cfg: RunConfig) -> framework.MixConfig:
    return framework.MixConfig(
        T=cfg.T, eps=cfg.eps, gamma=cfg.gamma, p=cfg.p, seed=cfg.seed, gfo=cfg.gfo,
        gfo_params=gfo_params(cfg, cfg.gfo), hfo=cfg.hfo, hfo_params=hfo_params(cfg, cfg.hfo),
        k=cfg.k, rho=cfg.rho, check_params=eig_options(cfg))


# ---------------------------------------------------------------------------
# running


@dataclass
class RunOutcome:
    rows: list
    summary: dict
    final_x: np.ndarray
    mix: framework.MixRunResult | None = None


def _row(oracle, t, inner, x, phase, min_eig=None):
    f, g = oracle.problem.mean_value_grad(x)
    c = oracle.counters
    return TraceRow(t, inner, c.wall_nanos, c.ifo_calls, c.iso_calls, float(f),
                    float(np.linalg.norm(g)), min_eig, phase)


def run_stack(problem, cfg: RunConfig, x0=None) -> RunOutcome:
    """Execute one configured optimizer stack on ``problem``."""
    cfg.validate()
    oracle = Oracle(problem)
    x = start_point(cfg, problem) if x0 is None else np.array(x0, dtype=float)
    budget = Budget(cfg.max_ifo, cfg.max_iso, cfg.max_wall)
    gamma = cfg.gamma if cfg.gamma is not None else math.sqrt(cfg.eps)
    mix = None
    exhausted = False
    if cfg.method == "mix":
        mix = framework.mix_run(oracle, x, mix_config(cfg), budget)
        rows, x, exhausted = mix.trace, mix.final_x, mix.budget_exhausted
    else:
        rows = [_row(oracle, 0, 0, x, "gfo")]
        if cfg.method in framework.GFO_REGISTRY:
            step = framework.make_gfo(cfg.method, problem, cfg.eps, gfo_params(cfg, cfg.method))
            phase = "gfo"
        else:
            step = framework.make_hfo(cfg.method, problem, cfg.eps, gamma, cfg.rho,
                                      hfo_params(cfg, cfg.method))
            phase = "hfo"
        seeds = framework.substream(cfg.seed, phase)
        for t in range(1, cfg.T + 1):
            res = step(oracle, x, int(seeds.integers(2**63)))
            if phase == "gfo":
                x, inner = res.z, res.iterations
            else:
                x, inner = res.y, res.solver_iterations
            rows.append(_row(oracle, t, inner, x, phase))
            if budget.exhausted(oracle.counters):
                exhausted = True
                break
    counters = oracle.counters
    last = rows[-1]
    summary = dict(
        method=cfg.method, final_f=last.f, final_grad_norm=last.grad_norm,
        ifo=counters.ifo_calls, iso=counters.iso_calls,
        oracle_units=counters.ifo_calls + counters.iso_calls,
        wall_seconds=counters.wall_nanos / 1e9, outer_iters=last.outer,
        budget_exhausted=exhausted,
        halted_early=bool(mix.halted_early) if mix else False,
    )
    if mix is not None:
        summary["p"] = mix.p
    return RunOutcome(rows, summary, x, mix)


def trace_header(cfg: RunConfig):
    header = {"saddlemix_version": __version__,
              "ranking_unit": "1 ISO = 1 IFO (reporting convention)"}
    for key, value in cfg.resolved().items():
        header[f"config.{key}"] = "none" if value is None else value
    for method, sub in sorted(cfg.overrides.items()):
        for key, value in sorted(sub.items()):
            header[f"config.{method}.{key}"] = "none" if value is None else value
    return header


def run_to_files(cfg: RunConfig, problem=None) -> RunOutcome:
    problem = problem if problem is not None else build_problem(cfg)
    outcome = run_stack(problem, cfg)
    write_trace(outcome.rows, cfg.output, trace_header(cfg), cfg.timing)
    summary_path = cfg.summary or cfg.output + ".summary.json"
    write_text_atomic(summary_path, json.dumps(outcome.summary, indent=2, sort_keys=True) + "\n")
    return outcome


def compare(problem, cfg: RunConfig, methods, out_prefix=None):
    """Run each method on ``problem`` and return one summary row per method."""
    table = []
    for method in methods:
        sub = cfg.for_method(method)
        outcome = run_stack(problem, sub)
        if out_prefix:
            write_trace(outcome.rows, f"{out_prefix}{method}.csv", trace_header(sub), sub.timing)
        table.append(outcome.summary)
    return table


SUMMARY_COLUMNS = ("method", "final_f", "ifo", "iso", "oracle_units", "wall_seconds",
                   "budget_exhausted")


def format_table(table, columns=SUMMARY_COLUMNS):
    lines = [",".join(columns)]
    for row in table:
        cells = []
        for c in columns:
            v = row.get(c, "")
            cells.append(f"{v:.17g}" if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# grid search


class GridError(RuntimeError):
    def __init__(self, message, table):
        super().__init__(message)
        self.table = table


def grid_search(problem, template: RunConfig, grid: dict, seed=0, tied=False):
    """Run every cell of ``grid`` and rank by final f, ties by total oracle units.

    With ``tied`` set, ``adam_eps`` follows ``adam_alpha`` in every cell.
    Cells that raise a numeric error or end at a non-finite value count as
    diverged.  Returns ``(best_config, table)``.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ContractError("grid must be non-empty")
    keys = list(grid)
    table = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, values))
        if tied and "adam_alpha" in cell:
            cell["adam_eps"] = cell["adam_alpha"]
        cfg = dataclasses.replace(template, seed=seed, **cell)
        try:
            s = run_stack(problem, cfg).summary
            diverged = not math.isfinite(s["final_f"])
        except NumericError as exc:
            log.info("grid cell %s diverged: %s", cell, exc)
            s, diverged = dict(final_f=math.inf, oracle_units=math.inf), True
        table.append(dict(cell=cell, final_f=s["final_f"], oracle_units=s["oracle_units"],
                          diverged=diverged))
    ranked = sorted((r for r in table if not r["diverged"]),
                    key=lambda r: (r["final_f"], r["oracle_units"]))
    if not ranked:
        raise GridError("every grid cell diverged", table)
    best = dataclasses.replace(template, seed=seed, **ranked[0]["cell"])
    return best, table


# ---------------------------------------------------------------------------
# self-checks


def directional_fd_error(problem, x, u, h=1e-5):
    h = h * max(1.0, float(np.linalg.norm(x)))
    fd = (problem.mean_value(x + h * u) - problem.mean_value(x - h * u)) / (2 * h)
    exact = float(problem.mean_value_grad(x)[1] @ u)
    return abs(fd - exact) / max(1.0, abs(exact))


def validate_problems(catalogue=None, pairs=20, seed=0, tol=1e-5):
    """Oracle self-checks; returns rows ``(problem, check, worst_value, passed)``."""
    from .oracle import check_hvp

    catalogue = catalogue if catalogue is not None else problems.shipped_problems(seed)
    rows = []
    for name, problem in catalogue.items():
        rng = np.random.default_rng([seed, 17])
        oracle = Oracle(problem)
        hvp_err = grad_err = 0.0
        for _ in range(pairs):
            x = rng.uniform(-1, 1, problem.d)
            v = rng.standard_normal(problem.d)
            hvp_err = max(hvp_err, check_hvp(oracle, x, v))
            grad_err = max(grad_err, directional_fd_error(problem, x, v / np.linalg.norm(v)))
        rows.append((name, "hvp_finite_difference", hvp_err, hvp_err <= tol))
        rows.append((name, "grad_finite_difference", grad_err, grad_err <= tol))
        if isinstance(problem, problems.SyntheticSaddleProblem):
            eig = problems.dense_hessian(oracle, np.zeros(problem.d)).eigvalsh()
            err = max(abs(eig[0] - problem.neg_eig),
                      max(0.0, problem.pos_range[0] - eig[1]),
                      max(0.0, eig[-1] - problem.pos_range[1]))
            rows.append((name, "origin_spectrum", float(err), err <= 1e-9))
    return rows
