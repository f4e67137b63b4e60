"""Optimal control problems and their true Hamiltonians.

The Hamiltonian of a problem with running cost L and dynamics phi is
``H = -L + psi . phi``.  Eliminating the control through the stationarity
condition ``dH/du = 0`` yields the reduced (true) Hamiltonian, either as a
closed-form expression or, when the stationarity system is not symbolically
invertible, as a pointwise Newton solve.  Both backends expose the same
interface: values and the envelope gradient of the reduced Hamiltonian over
``(x, psi, t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from . import symexpr as sx
from .symexpr import (
    HAMILTONIAN_SYMBOL,
    Expr,
    Role,
    Symbol,
    SymbolTable,
)

NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-12
DENOMINATOR_CLEARANCE = 0.1


class OcpError(Exception):
    pass


class NotAffineInControlError(OcpError):
    """Stationarity is not affine in u with an invertible diagonal coefficient;
    the problem file must supply a control law (closed-form or a Newton guess)."""


class SingularControlHessianError(OcpError):
    pass


class InvalidControlLawError(OcpError):
    pass


class NewtonDivergenceError(OcpError):
    def __init__(self, point):
        super().__init__(f"control Newton solve diverged at {_fmt_point(point)}")
        self.point = point


class SingularHessianAtError(OcpError):
    def __init__(self, point):
        super().__init__(f"control Hessian not negative definite at {_fmt_point(point)}")
        self.point = point


class SamplerStarvationError(OcpError):
    pass


def _fmt_point(point) -> str:
    if isinstance(point, Mapping):
        return "{" + ", ".join(f"{s.name}={v:.4g}" for s, v in point.items()) + "}"
    return repr(point)


@dataclass(frozen=True)
class Problem:
    """An optimal control problem with all parameter values already bound."""

    name: str
    table: SymbolTable
    lagrangian: Expr
    dynamics: tuple[Expr, ...]
    parameters: dict[str, Fraction] = field(default_factory=dict)
    sampling_box: dict[Symbol, tuple[float, float]] = field(default_factory=dict)
    excluded_denominators: tuple[Expr, ...] = ()
    control_law: tuple[Expr, ...] | None = None
    control_guess: tuple[float, ...] | None = None
    k_u: int = 0

    def __post_init__(self):
        n = self.table.n
        if len(self.dynamics) != n:
            raise OcpError(f"{len(self.dynamics)} dynamics for {n} states")
        costates = set(self.table.costates)
        for label, e in [("lagrangian", self.lagrangian)] + [
                (f"dynamics[{i}]", d) for i, d in enumerate(self.dynamics)]:
            if sx.free_symbols(e) & costates:
                raise OcpError(f"{label} must not mention costates")
        sampled = set(self.table.phase) | {self.table.time}
        missing = sampled - set(self.sampling_box)
        if missing:
            raise OcpError("sampling box misses " + ", ".join(sorted(s.name for s in missing)))
        controls = set(self.table.controls)
        for e in self.excluded_denominators:
            if sx.free_symbols(e) & controls:
                raise OcpError("excluded denominators may not depend on controls")
        if self.control_law is not None and len(self.control_law) != self.table.m_ctl:
            raise OcpError("control law must give one expression per control")

    def guess_vector(self) -> np.ndarray:
        if self.control_guess is not None:
            return np.asarray(self.control_guess, dtype=float)
        return np.zeros(self.table.m_ctl)


@dataclass(frozen=True)
class ClosedFormLaw:
    """u_bar(x, psi, t) solving the stationarity condition in closed form."""

    expressions: tuple[Expr, ...]


@dataclass(frozen=True)
class ImplicitLaw:
    """Stationarity solved pointwise by damped Newton from a fixed guess."""

    guess: tuple[float, ...]


def build_hamiltonian(problem: Problem) -> Expr:
    """H(x, u, psi, t) = -L + sum_i psi_i * phi_i."""
    terms = [sx.negate(problem.lagrangian)]
    for psi, phi in zip(problem.table.costates, problem.dynamics):
        terms.append(sx.mul(sx.symref(psi), phi))
    return sx.add(*terms)


def solve_stationarity(problem: Problem, hamiltonian: Expr):
    """Solve dH/du = 0 for u when it is affine with a u-free diagonal matrix.

    Returns a ClosedFormLaw, or passes through a user-supplied law from the
    problem file.  Raises NotAffineInControlError when symbolic elimination is
    out of reach, which signals the caller to fall back to the implicit
    backend.
    """
    if problem.control_law is not None:
        return ClosedFormLaw(problem.control_law)
    controls = problem.table.controls
    control_set = set(controls)
    grads = [sx.differentiate(hamiltonian, u) for u in controls]
    diag = []
    for j, gj in enumerate(grads):
        for k, uk in enumerate(controls):
            m_jk = sx.differentiate(gj, uk)
            if sx.free_symbols(m_jk) & control_set:
                raise NotAffineInControlError(
                    f"dH/d{controls[j].name} is not affine in the controls")
            if j != k and not sx.is_symbolically_zero(m_jk):
                raise NotAffineInControlError(
                    "stationarity couples controls; supply a control law")
            if j == k:
                if sx.is_symbolically_zero(m_jk):
                    raise SingularControlHessianError(
                        f"d2H/d{controls[j].name}^2 vanishes identically")
                diag.append(m_jk)
    zeros = {u: sx.ZERO for u in controls}
    law = []
    for gj, m_jj in zip(grads, diag):
        g0 = sx.substitute(gj, zeros)
        law.append(sx.negate(sx.divide(g0, m_jj)))
    for gj in grads:
        resub = sx.substitute(gj, dict(zip(controls, law)))
        if not sx.is_symbolically_zero(resub):
            raise SingularControlHessianError(
                "eliminated control does not satisfy stationarity symbolically")
    return ClosedFormLaw(tuple(law))


@dataclass(frozen=True)
class TrueHamiltonian:
    """The control-eliminated Hamiltonian of a problem."""

    problem: Problem
    hamiltonian: Expr
    law: ClosedFormLaw | ImplicitLaw
    reduced: Expr | None
    k_u: int = 0

    @property
    def is_closed_form(self) -> bool:
        return isinstance(self.law, ClosedFormLaw)

    @property
    def table(self) -> SymbolTable:
        return self.problem.table

    def evaluator(self) -> "HamiltonianEvaluator":
        return HamiltonianEvaluator(self)

    def flow(self) -> "HamiltonianFlow":
        return HamiltonianFlow(self)


def true_hamiltonian(problem: Problem, hamiltonian: Expr | None = None,
                     law=None, backend: str = "auto") -> TrueHamiltonian:
    """Build the true Hamiltonian, choosing or forcing a control backend."""
    h = hamiltonian if hamiltonian is not None else build_hamiltonian(problem)
    if law is None:
        if backend == "implicit":
            law = ImplicitLaw(tuple(problem.guess_vector()))
        else:
            try:
                law = solve_stationarity(problem, h)
            except NotAffineInControlError:
                if backend == "closed":
                    raise
                law = ImplicitLaw(tuple(problem.guess_vector()))
    if isinstance(law, ClosedFormLaw):
        for e in law.expressions:
            if sx.free_symbols(e) & set(problem.table.controls):
                raise InvalidControlLawError("closed-form law must be control-free")
        bindings = dict(zip(problem.table.controls, law.expressions))
        reduced = sx.expand(sx.substitute(h, bindings))
        if sx.free_symbols(reduced) & set(problem.table.controls):
            raise InvalidControlLawError("reduced Hamiltonian still mentions controls")
        return TrueHamiltonian(problem, h, law, reduced, k_u=problem.k_u)
    return TrueHamiltonian(problem, h, law, None, k_u=problem.k_u)


class SampleBatch:
    """Columns of sample points plus the true-Hamiltonian envelope data."""

    def __init__(self, table: SymbolTable, columns: dict[Symbol, np.ndarray],
                 hvalue: np.ndarray, hgrad: dict[Symbol, np.ndarray],
                 controls: np.ndarray | None = None):
        self.table = table
        self.columns = columns
        self.hvalue = hvalue
        self.hgrad = hgrad
        self.controls = controls

    @property
    def size(self) -> int:
        return len(self.hvalue)

    def column(self, sym: Symbol) -> np.ndarray:
        if sym is HAMILTONIAN_SYMBOL:
            return self.hvalue
        return self.columns[sym]

    def point(self, i: int) -> dict[Symbol, float]:
        return {s: float(col[i]) for s, col in self.columns.items()}

    def concat(self, other: "SampleBatch") -> "SampleBatch":
        cols = {s: np.concatenate([c, other.columns[s]]) for s, c in self.columns.items()}
        grads = {s: np.concatenate([g, other.hgrad[s]]) for s, g in self.hgrad.items()}
        ctl = None
        if self.controls is not None and other.controls is not None:
            ctl = np.vstack([self.controls, other.controls])
        return SampleBatch(self.table, cols, np.concatenate([self.hvalue, other.hvalue]),
                           grads, ctl)


class HamiltonianEvaluator:
    """Values and envelope gradient of the reduced Hamiltonian over (x, psi, t).

    With a closed-form law the gradient comes from compiled symbolic partials
    of the reduced expression.  With an implicit law, each point gets a damped
    Newton solve of dH/du = 0 (negative-definite control Hessian enforced) and
    the gradient is the envelope gradient of H at the solved control.
    """

    def __init__(self, th: TrueHamiltonian):
        self.th = th
        table = th.table
        self._grad_syms = table.phase + (table.time,)
        if th.is_closed_form:
            args = self._grad_syms
            self._value_fn = sx.compile_fn(th.reduced, args)
            self._partials = [sx.compile_fn(sx.differentiate(th.reduced, s), args)
                              for s in self._grad_syms]
            self._args = args
        else:
            controls = table.controls
            args = self._grad_syms + controls
            h = th.hamiltonian
            self._value_fn = sx.compile_fn(h, args)
            self._partials = [sx.compile_fn(sx.differentiate(h, s), args)
                              for s in self._grad_syms]
            grads_u = [sx.differentiate(h, u) for u in controls]
            self._newton_grad = [sx.compile_fn(g, args) for g in grads_u]
            self._newton_hess = [[sx.compile_fn(sx.differentiate(g, u), args)
                                  for u in controls] for g in grads_u]
            self._guess = np.asarray(th.law.guess, dtype=float)
            self._warm: np.ndarray | None = None
            self._args = args

    # ---- batch path --------------------------------------------------------
    def prepare(self, columns: dict[Symbol, np.ndarray]):
        """Evaluate the envelope over point columns.

        Returns (batch, keep) where `keep` marks the input rows that survived
        (implicit-backend Newton failures and non-finite evaluations drop out).
        """
        n_pts = len(next(iter(columns.values())))
        if self.th.is_closed_form:
            base = [columns[s] for s in self._args]
            with np.errstate(all="ignore"):
                hval = np.asarray(self._value_fn(*base), dtype=float)
                hval = np.broadcast_to(hval, (n_pts,)).copy()
                grads = [np.broadcast_to(np.asarray(p(*base), dtype=float), (n_pts,)).copy()
                         for p in self._partials]
            keep = np.isfinite(hval)
            for g in grads:
                keep &= np.isfinite(g)
            cols = {s: c[keep] for s, c in columns.items()}
            hgrad = {s: g[keep] for s, g in zip(self._grad_syms, grads)}
            return SampleBatch(self.th.table, cols, hval[keep], hgrad), keep
        u_sol, ok = self._newton_batch(columns, n_pts)
        base = [columns[s] for s in self._grad_syms]
        uc = list(u_sol.T)
        with np.errstate(all="ignore"):
            hval = np.broadcast_to(np.asarray(self._value_fn(*base, *uc), dtype=float),
                                   (n_pts,)).copy()
            grads = [np.broadcast_to(np.asarray(p(*base, *uc), dtype=float), (n_pts,)).copy()
                     for p in self._partials]
        keep = ok & np.isfinite(hval)
        for g in grads:
            keep &= np.isfinite(g)
        cols = {s: c[keep] for s, c in columns.items()}
        hgrad = {s: g[keep] for s, g in zip(self._grad_syms, grads)}
        return SampleBatch(self.th.table, cols, hval[keep], hgrad, u_sol[keep]), keep

    def _newton_batch(self, columns, n_pts):
        m = self.th.table.m_ctl
        base = [columns[s] for s in self._grad_syms]
        u = np.tile(self._guess, (n_pts, 1))
        ok = np.ones(n_pts, dtype=bool)
        if m == 0:
            return u, ok
        converged = np.zeros(n_pts, dtype=bool)
        for _ in range(NEWTON_MAX_ITER):
            with np.errstate(all="ignore"):
                g = np.stack([np.broadcast_to(np.asarray(f(*base, *u.T), dtype=float),
                                              (n_pts,)) for f in self._newton_grad], axis=1)
            finite = np.isfinite(g).all(axis=1)
            ok &= finite | converged
            converged = converged | (ok & (np.abs(g).max(axis=1) < NEWTON_TOL))
            active = ok & ~converged
            if not active.any():
                break
            with np.errstate(all="ignore"):
                hess = np.stack([np.stack(
                    [np.broadcast_to(np.asarray(f(*base, *u.T), dtype=float), (n_pts,))
                     for f in row], axis=1) for row in self._newton_hess], axis=1)
            hess_ok = np.isfinite(hess).all(axis=(1, 2))
            ok &= hess_ok | converged
            active &= hess_ok
            if not active.any():
                continue
            step = np.zeros_like(u)
            try:
                step[active] = np.linalg.solve(hess[active], g[active, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                for i in np.nonzero(active)[0]:
                    try:
                        step[i] = np.linalg.solve(hess[i], g[i])
                    except np.linalg.LinAlgError:
                        ok[i] = False
                        active[i] = False
            step = np.clip(step, -2.0, 2.0)
            u = np.where(active[:, None], u - step, u)
            bounded = np.abs(u).max(axis=1) < 1e6
            ok &= bounded | converged
        ok &= converged
        if ok.any():
            with np.errstate(all="ignore"):
                hess = np.stack([np.stack(
                    [np.broadcast_to(np.asarray(f(*base, *u.T), dtype=float), (n_pts,))
                     for f in row], axis=1) for row in self._newton_hess], axis=1)
            sym = 0.5 * (hess + np.swapaxes(hess, 1, 2))
            bad = np.zeros(n_pts, dtype=bool)
            idx = np.nonzero(ok)[0]
            eig = np.linalg.eigvalsh(sym[idx])
            bad[idx] = eig.max(axis=1) >= 0.0
            ok &= ~bad
        return u, ok

    # ---- scalar path -------------------------------------------------------
    def value_and_gradient(self, point: Mapping[Symbol, float]):
        """(H(point), gradient dict over x, psi, t); Newton is warm-started."""
        if self.th.is_closed_form:
            base = [float(point[s]) for s in self._args]
            value = float(self._value_fn(*base))
            grad = {s: float(p(*base)) for s, p in zip(self._grad_syms, self._partials)}
            return value, grad
        u = self._newton_point(point)
        base = [float(point[s]) for s in self._grad_syms]
        value = float(self._value_fn(*base, *u))
        grad = {s: float(p(*base, *u)) for s, p in zip(self._grad_syms, self._partials)}
        return value, grad

    def solve_control(self, point: Mapping[Symbol, float]) -> np.ndarray:
        if self.th.is_closed_form:
            bindings = {s: float(point[s]) for s in self._grad_syms}
            return np.array([sx.evaluate(e, bindings) for e in self.th.law.expressions])
        return self._newton_point(point)

    def _newton_point(self, point) -> np.ndarray:
        base = [float(point[s]) for s in self._grad_syms]
        starts = [self._warm] if self._warm is not None else []
        starts.append(self._guess)
        for u0 in starts:
            u = self._newton_damped(base, np.array(u0, dtype=float))
            if u is not None:
                self._warm = u.copy()
                return u
        raise NewtonDivergenceError({s: v for s, v in zip(self._grad_syms, base)})

    def _newton_damped(self, base, u):
        def norm(vec):
            return np.abs(vec).max() if len(vec) else 0.0

        with np.errstate(all="ignore"):
            g = np.array([f(*base, *u) for f in self._newton_grad], dtype=float)
        if not np.isfinite(g).all():
            return None
        for _ in range(NEWTON_MAX_ITER):
            if norm(g) < NEWTON_TOL:
                hess = np.array([[f(*base, *u) for f in row] for row in self._newton_hess])
                sym = 0.5 * (hess + hess.T)
                if not np.isfinite(sym).all() or np.linalg.eigvalsh(sym).max() >= 0.0:
                    raise SingularHessianAtError(
                        {s: v for s, v in zip(self._grad_syms, base)})
                return u
            with np.errstate(all="ignore"):
                hess = np.array([[f(*base, *u) for f in row] for row in self._newton_hess])
            if not np.isfinite(hess).all():
                return None
            try:
                step = np.linalg.solve(hess, g)
            except np.linalg.LinAlgError:
                return None
            lam, improved = 1.0, False
            while lam > 1e-6:
                cand = u - lam * step
                with np.errstate(all="ignore"):
                    g_cand = np.array([f(*base, *cand) for f in self._newton_grad],
                                      dtype=float)
                if np.isfinite(g_cand).all() and norm(g_cand) < norm(g):
                    u, g, improved = cand, g_cand, True
                    break
                lam *= 0.5
            if not improved:
                return None
        return None


def eval_true_hamiltonian(th: TrueHamiltonian, point: Mapping[Symbol, float],
                          evaluator: HamiltonianEvaluator | None = None):
    """Value and gradient of the reduced Hamiltonian at one point."""
    ev = evaluator if evaluator is not None else th.evaluator()
    return ev.value_and_gradient(point)


class PhaseFunction:
    """A function of (x, psi, t) whose expression may reference the reduced
    Hamiltonian through the placeholder symbol ``H``.

    Values and (chain-ruled) gradients are evaluated against a SampleBatch, so
    the same object works with both control backends.
    """

    def __init__(self, expr: Expr, table: SymbolTable):
        self.expr = expr
        self.table = table
        self._grad_syms = table.phase + (table.time,)
        self._args = self._grad_syms + (HAMILTONIAN_SYMBOL,)
        self.has_hamiltonian = HAMILTONIAN_SYMBOL in sx.free_symbols(expr)
        self._value_fn = sx.compile_fn(expr, self._args)
        self._partials = [sx.compile_fn(sx.differentiate(expr, s), self._args)
                          for s in self._grad_syms]
        self._dham = sx.compile_fn(sx.differentiate(expr, HAMILTONIAN_SYMBOL), self._args)

    def _base(self, batch: SampleBatch):
        return [batch.columns[s] for s in self._grad_syms] + [batch.hvalue]

    def values(self, batch: SampleBatch) -> np.ndarray:
        base = self._base(batch)
        return np.broadcast_to(np.asarray(self._value_fn(*base), dtype=float),
                               (batch.size,)).copy()

    def gradient(self, batch: SampleBatch) -> dict[Symbol, np.ndarray]:
        base = self._base(batch)
        out = {}
        chain = None
        if self.has_hamiltonian:
            chain = np.broadcast_to(np.asarray(self._dham(*base), dtype=float),
                                    (batch.size,))
        for s, p in zip(self._grad_syms, self._partials):
            g = np.broadcast_to(np.asarray(p(*base), dtype=float), (batch.size,)).copy()
            if chain is not None:
                g = g + chain * batch.hgrad[s]
            out[s] = g
        return out

    def to_symbolic(self, th: TrueHamiltonian) -> Expr:
        """Substitute the closed-form reduced Hamiltonian for the placeholder."""
        if not self.has_hamiltonian:
            return self.expr
        if not th.is_closed_form:
            raise OcpError("no closed form available for the Hamiltonian placeholder")
        return sx.substitute(self.expr, {HAMILTONIAN_SYMBOL: th.reduced})

    def __repr__(self) -> str:
        return f"PhaseFunction({sx.to_string(self.expr)})"


class HamiltonianFlow:
    """Right-hand side of xdot = dH/dpsi, psidot = -dH/dx."""

    def __init__(self, th: TrueHamiltonian):
        self.th = th
        self.evaluator = th.evaluator()
        table = th.table
        self._states = table.states
        self._costates = table.costates
        self._time = table.time
        self.symbolic = None
        if th.is_closed_form:
            self.symbolic = {
                "xdot": tuple(sx.differentiate(th.reduced, p) for p in self._costates),
                "psidot": tuple(sx.negate(sx.differentiate(th.reduced, x))
                                for x in self._states),
            }

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        n = len(self._states)
        point = {self._time: t}
        for i, s in enumerate(self._states):
            point[s] = y[i]
        for i, s in enumerate(self._costates):
            point[s] = y[n + i]
        _, grad = self.evaluator.value_and_gradient(point)
        out = np.empty(2 * n)
        for i, s in enumerate(self._costates):
            out[i] = grad[s]
        for i, s in enumerate(self._states):
            out[n + i] = -grad[s]
        return out


def hamiltonian_flow(th: TrueHamiltonian) -> HamiltonianFlow:
    return th.flow()


def autonomize(th: TrueHamiltonian):
    """K(x, psi, theta, t) = reduced H - theta over the table extended with theta.

    Along the extended flow theta follows dH/dt, so K is conserved even for
    time-dependent problems.
    """
    if not th.is_closed_form:
        raise OcpError("autonomization needs a closed-form reduced Hamiltonian")
    theta = Symbol("theta", Role.AUTONOMIZATION)
    extended = th.table.extended(theta)
    k = sx.add(th.reduced, sx.negate(sx.symref(theta)))
    return k, extended


class PointSampler:
    """Uniform draws from the problem's sampling box.

    Points where an excluded denominator comes within 0.1 of zero are
    rejected, as are points the implicit backend cannot solve.
    """

    def __init__(self, problem: Problem, evaluator: HamiltonianEvaluator,
                 rng: np.random.Generator):
        self.problem = problem
        self.evaluator = evaluator
        self.rng = rng
        table = problem.table
        self._syms = table.phase + (table.time,)
        self._bounds = [problem.sampling_box[s] for s in self._syms]
        self._denoms = [sx.compile_fn(d, self._syms)
                        for d in problem.excluded_denominators]

    def _raw(self, count: int) -> dict[Symbol, np.ndarray]:
        return {s: self.rng.uniform(lo, hi, size=count)
                for s, (lo, hi) in zip(self._syms, self._bounds)}

    def draw(self, count: int) -> SampleBatch:
        got: SampleBatch | None = None
        attempts = 0
        while got is None or got.size < count:
            missing = count - (0 if got is None else got.size)
            attempts += missing
            if attempts > 200 * count + 1000:
                raise SamplerStarvationError(
                    f"could not find {count} admissible points in {attempts} draws")
            cols = self._raw(max(missing, 8))
            mask = np.ones(len(cols[self._syms[0]]), dtype=bool)
            base = [cols[s] for s in self._syms]
            with np.errstate(all="ignore"):
                for d in self._denoms:
                    mask &= np.abs(np.asarray(d(*base), dtype=float)) >= DENOMINATOR_CLEARANCE
            cols = {s: c[mask] for s, c in cols.items()}
            if not mask.any():
                continue
            batch, _ = self.evaluator.prepare(cols)
            got = batch if got is None else got.concat(batch)
        if got.size > count:
            cols = {s: c[:count] for s, c in got.columns.items()}
            grads = {s: g[:count] for s, g in got.hgrad.items()}
            ctl = got.controls[:count] if got.controls is not None else None
            got = SampleBatch(got.table, cols, got.hvalue[:count], grads, ctl)
        return got

    def draw_point(self) -> dict[Symbol, float]:
        batch = self.draw(1)
        return batch.point(0)
