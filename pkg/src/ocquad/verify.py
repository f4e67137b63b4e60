"""Independent numerical oracles: extremal integration, conservation drift,
and a finite-difference Poisson bracket.

Everything here deliberately avoids the symbolic machinery it is meant to
check: the integrator is plain fixed-step RK4 on the Hamiltonian flow, and the
bracket oracle uses central differences of pointwise evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import symexpr as sx
from .ocp import (
    HamiltonianEvaluator,
    OcpError,
    PhaseFunction,
    TrueHamiltonian,
)
from .symexpr import Expr, Symbol, SymbolTable


class PoleEncounteredError(OcpError):
    def __init__(self, time: float):
        super().__init__(f"flow left the evaluable region near t = {time:.6g}")
        self.time = time


@dataclass
class Trajectory:
    """A discretised Pontryagin extremal on a uniform time grid."""

    table: SymbolTable
    times: np.ndarray            # (N+1,)
    states: np.ndarray           # (N+1, 2n), columns x_1..x_n, psi_1..psi_n
    hamiltonian_values: np.ndarray
    controls: np.ndarray | None = None

    def columns(self) -> dict[Symbol, np.ndarray]:
        cols = {self.table.time: self.times}
        for i, s in enumerate(self.table.phase):
            cols[s] = self.states[:, i]
        return cols


def integrate_extremal(th: TrueHamiltonian, z0, t0: float = 0.0,
                       horizon: float = 1.0, step: float = 1e-3) -> Trajectory:
    """Classical RK4 on xdot = dH/dpsi, psidot = -dH/dx.

    `z0` is the initial (x_1..x_n, psi_1..psi_n).  Aborts with
    PoleEncounteredError if the flow leaves the evaluable region.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    n_steps = int(round(horizon / step))
    if n_steps < 1 or abs(n_steps * step - horizon) > 1e-9 * max(1.0, abs(horizon)):
        raise ValueError("horizon must be an integral number of steps")
    flow = th.flow()
    y = np.asarray(z0, dtype=float).copy()
    if y.shape != (2 * th.table.n,):
        raise ValueError(f"initial condition must have length {2 * th.table.n}")
    times = t0 + step * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, len(y)))
    states[0] = y

    grid_syms = th.table.phase + (th.table.time,)
    denominators = [sx.compile_fn(d, grid_syms)
                    for d in th.problem.excluded_denominators]

    def check_denominators(t, state, previous):
        current = [float(d(*state, t)) for d in denominators]
        for before, now in zip(previous, current):
            if abs(now) < 1e-2 or (before is not None and before * now < 0):
                raise PoleEncounteredError(t)
        return current

    def rhs(t, state):
        out = flow.rhs(t, state)
        if not np.isfinite(out).all():
            raise PoleEncounteredError(t)
        return out

    den_prev = check_denominators(t0, y, [None] * len(denominators))
    for k in range(n_steps):
        t = times[k]
        try:
            k1 = rhs(t, y)
            k2 = rhs(t + step / 2, y + step / 2 * k1)
            k3 = rhs(t + step / 2, y + step / 2 * k2)
            k4 = rhs(t + step, y + step * k3)
        except OcpError as exc:
            if isinstance(exc, PoleEncounteredError):
                raise
            raise PoleEncounteredError(t) from exc
        y = y + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(y).all():
            raise PoleEncounteredError(t)
        den_prev = check_denominators(times[k + 1], y, den_prev)
        states[k + 1] = y

    evaluator = th.evaluator()
    batch, keep = evaluator.prepare(_grid_columns(th.table, times, states))
    if not keep.all():
        raise PoleEncounteredError(float(times[int(np.argmin(keep))]))
    return Trajectory(th.table, times, states, batch.hvalue, batch.controls)


def _grid_columns(table, times, states):
    cols = {table.time: times}
    for i, s in enumerate(table.phase):
        cols[s] = states[:, i]
    return cols


def integrate_autonomized(th: TrueHamiltonian, z0, theta0: float = 0.0,
                          t0: float = 0.0, horizon: float = 1.0,
                          step: float = 1e-3):
    """Flow of K = H - theta on the extended space (x, psi, theta, t).

    Returns (tau grid, extended states, K values); theta follows dH/dt and t
    advances uniformly, so K stays constant even for time-dependent problems.
    """
    evaluator = th.evaluator()
    table = th.table
    n = table.n
    n_steps = int(round(horizon / step))

    def rhs(state):
        point = {table.time: state[-1]}
        for i, s in enumerate(table.phase):
            point[s] = state[i]
        value, grad = evaluator.value_and_gradient(point)
        out = np.empty(2 * n + 2)
        for i, s in enumerate(table.costates):
            out[i] = grad[s]
        for i, s in enumerate(table.states):
            out[n + i] = -grad[s]
        out[2 * n] = grad[table.time]
        out[2 * n + 1] = 1.0
        return out

    y = np.concatenate([np.asarray(z0, dtype=float), [theta0, t0]])
    taus = step * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, len(y)))
    states[0] = y
    for k in range(n_steps):
        k1 = rhs(y)
        k2 = rhs(y + step / 2 * k1)
        k3 = rhs(y + step / 2 * k2)
        k4 = rhs(y + step * k3)
        y = y + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(y).all():
            raise PoleEncounteredError(float(taus[k]))
        states[k + 1] = y

    evalr = th.evaluator()
    batch, keep = evalr.prepare(_grid_columns(table, states[:, -1], states[:, :2 * n]))
    if not keep.all():
        raise PoleEncounteredError(float(taus[int(np.argmin(keep))]))
    k_values = batch.hvalue - states[:, 2 * n]
    return taus, states, k_values


def conservation_drift(f, traj: Trajectory, evaluator: HamiltonianEvaluator) -> float:
    """max_t |F(z(t), t) - F(z(0), t0)| over the trajectory grid."""
    func = f if isinstance(f, PhaseFunction) else PhaseFunction(f, traj.table)
    batch, keep = evaluator.prepare(traj.columns())
    if not keep.all():
        raise PoleEncounteredError(float(traj.times[int(np.argmin(keep))]))
    vals = func.values(batch)
    return float(np.abs(vals - vals[0]).max())


def fd_bracket_oracle(f: Expr, g: Expr, table: SymbolTable,
                      point: dict[Symbol, float], h: float = 1e-5) -> float:
    """Central-difference approximation of the canonical Poisson bracket."""

    def partial(e, s):
        up, dn = dict(point), dict(point)
        up[s] = point[s] + h
        dn[s] = point[s] - h
        return (sx.evaluate(e, up) - sx.evaluate(e, dn)) / (2 * h)

    total = 0.0
    for x, p in zip(table.states, table.costates):
        total += partial(f, x) * partial(g, p) - partial(f, p) * partial(g, x)
    return total
