import numpy as np
import pytest

from ocquad import ocp
from ocquad import symexpr as sx
from ocquad.ocp import (
    NotAffineInControlError,
    OcpError,
    PointSampler,
    Problem,
    build_hamiltonian,
    autonomize,
    eval_true_hamiltonian,
    solve_stationarity,
    true_hamiltonian,
)
from ocquad.problems import builtin, load_problem
from ocquad.symexpr import evaluate, parse


@pytest.fixture(scope="module")
def dubins():
    problem, _ = load_problem(builtin("dubins"))
    return problem


@pytest.fixture(scope="module")
def martinet():
    problem, _ = load_problem(builtin("martinet"))
    return problem


@pytest.fixture(scope="module")
def trailer():
    problem, _ = load_problem(builtin("trailer"))
    return problem


def scalar_problem():
    """One state, L = u^2/2, xdot = u."""
    doc = {
        "name": "scalar",
        "states": ["x1"],
        "controls": ["u1"],
        "time": "t",
        "lagrangian": "u1^2/2",
        "dynamics": ["u1"],
    }
    problem, _ = load_problem(doc)
    return problem


def phase_points(problem, count, seed=0, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    table = problem.table
    pts = []
    for _ in range(count):
        pt = {s: rng.uniform(lo, hi) for s in table.phase}
        pt[table.time] = rng.uniform(0.0, 1.0)
        pts.append(pt)
    return pts


class TestBuildHamiltonian:
    def test_dubins(self, dubins):
        h = build_hamiltonian(dubins)
        expected = parse(
            "-(u1^2 + u2^2)/2 + psi1*u1*cos(x3) + psi2*u1*sin(x3) + psi3*u2",
            dubins.table)
        assert h == expected

    def test_free_dynamics(self):
        problem = scalar_problem()
        h = build_hamiltonian(problem)
        t = problem.table
        # L = u^2/2 leaves H = -u^2/2 + psi*u
        assert h == parse("-u1^2/2 + psi1*u1", t)

    def test_martinet(self, martinet):
        h = build_hamiltonian(martinet)
        expected = parse(
            "-(u1^2 + u2^2)/2 + psi1*u1 + psi2*u2/(1 + x1) + psi3*x2^2*u1",
            martinet.table)
        assert h == expected


class TestSolveStationarity:
    def test_dubins_law(self, dubins):
        law = solve_stationarity(dubins, build_hamiltonian(dubins))
        t = dubins.table
        assert law.expressions[0] == parse("psi1*cos(x3) + psi2*sin(x3)", t)
        assert law.expressions[1] == parse("psi3", t)

    def test_martinet_law(self, martinet):
        law = solve_stationarity(martinet, build_hamiltonian(martinet))
        t = martinet.table
        assert law.expressions[0] == parse("psi1 + x2^2*psi3", t)
        assert law.expressions[1] == parse("psi2/(1 + x1)", t)
        # substituting back kills dH/du symbolically
        h = build_hamiltonian(martinet)
        bindings = dict(zip(t.controls, law.expressions))
        for u in t.controls:
            resid = sx.substitute(sx.differentiate(h, u), bindings)
            assert sx.is_symbolically_zero(resid)

    def test_trailer_not_affine(self, trailer):
        with pytest.raises(NotAffineInControlError):
            solve_stationarity(trailer, build_hamiltonian(trailer))


class TestTrueHamiltonian:
    def test_dubins_reduced_matches_paper_form(self, dubins):
        th = true_hamiltonian(dubins)
        paper = parse("((cos(x3)*psi1 + sin(x3)*psi2)^2 + psi3^2)/2", dubins.table)
        for pt in phase_points(dubins, 50):
            assert abs(evaluate(th.reduced, pt) - evaluate(paper, pt)) < 1e-12

    def test_sr_reduced_matches_paper_form(self):
        problem, _ = load_problem(builtin("sr-2-3-5"))
        th = true_hamiltonian(problem)
        paper = parse(
            "(psi1^2 + (psi2 + x1*psi3 + 1/2*x1^2*psi4 + x1*x2*psi5)^2)/2",
            problem.table)
        for pt in phase_points(problem, 50):
            assert abs(evaluate(th.reduced, pt) - evaluate(paper, pt)) < 1e-12

    def test_martinet_reduced_matches_derived_form(self, martinet):
        th = true_hamiltonian(martinet)
        derived = parse("((psi1 + x2^2*psi3)^2 + (psi2/(1 + x1))^2)/2", martinet.table)
        for pt in phase_points(martinet, 50):
            if abs(1 + pt[martinet.table.state(1)]) < 0.1:
                continue
            assert abs(evaluate(th.reduced, pt) - evaluate(derived, pt)) < 1e-12

    def test_stationarity_residual_vanishes_on_samples(self, dubins, martinet):
        for problem in (dubins, martinet):
            th = true_hamiltonian(problem)
            h = th.hamiltonian
            t = problem.table
            bindings = dict(zip(t.controls, th.law.expressions))
            residuals = [sx.substitute(sx.differentiate(h, u), bindings)
                         for u in t.controls]
            for pt in phase_points(problem, 50, seed=1):
                if problem is martinet and abs(1 + pt[t.state(1)]) < 0.1:
                    continue
                for r in residuals:
                    assert abs(evaluate(r, pt)) <= 1e-9


class TestEvalTrueHamiltonian:
    def test_quadratic_scalar(self):
        problem = scalar_problem()
        th = true_hamiltonian(problem)
        t = problem.table
        assert th.reduced == parse("psi1^2/2", t)
        pt = {t.state(1): 0.3, t.costate(1): -0.7, t.time: 0.1}
        value, grad = eval_true_hamiltonian(th, pt)
        assert abs(value - 0.5 * 0.7 ** 2) < 1e-15
        assert grad[t.state(1)] == 0.0
        assert abs(grad[t.costate(1)] - (-0.7)) < 1e-15
        assert grad[t.time] == 0.0

    def test_closed_form_gradient_matches_finite_differences(self, dubins):
        th = true_hamiltonian(dubins)
        ev = th.evaluator()
        t = dubins.table
        h = 1e-6
        for pt in phase_points(dubins, 20, seed=2):
            _, grad = ev.value_and_gradient(pt)
            for s in t.phase + (t.time,):
                up, dn = dict(pt), dict(pt)
                up[s] += h
                dn[s] -= h
                fd = (ev.value_and_gradient(up)[0] - ev.value_and_gradient(dn)[0]) / (2 * h)
                assert abs(grad[s] - fd) < 1e-6

    @pytest.mark.parametrize("name", ["dubins", "martinet", "sr-2-3-5"])
    def test_implicit_backend_agrees_with_closed_form(self, name):
        problem, _ = load_problem(builtin(name))
        th_closed = true_hamiltonian(problem)
        th_impl = true_hamiltonian(problem, backend="implicit")
        assert not th_impl.is_closed_form
        ev_c = th_closed.evaluator()
        ev_i = th_impl.evaluator()
        x1 = problem.table.state(1)
        for pt in phase_points(problem, 30, seed=3):
            if name == "martinet" and abs(1 + pt[x1]) < 0.1:
                continue
            vc, gc = ev_c.value_and_gradient(pt)
            vi, gi = ev_i.value_and_gradient(pt)
            assert abs(vc - vi) < 1e-9
            for s in gc:
                assert abs(gc[s] - gi[s]) < 1e-9

    def test_envelope_identity(self, dubins, martinet):
        # gradient of reduced H equals the partials of H frozen at u = u_bar
        for problem in (dubins, martinet):
            th = true_hamiltonian(problem)
            ev = th.evaluator()
            t = problem.table
            h_partials = {s: sx.differentiate(th.hamiltonian, s)
                          for s in t.phase + (t.time,)}
            count = 0
            for pt in phase_points(problem, 250, seed=4):
                if problem is martinet and abs(1 + pt[t.state(1)]) < 0.1:
                    continue
                u_star = ev.solve_control(pt)
                full = dict(pt)
                full.update(zip(t.controls, u_star))
                _, grad = ev.value_and_gradient(pt)
                for s in grad:
                    assert abs(grad[s] - evaluate(h_partials[s], full)) < 1e-8
                count += 1
                if count == 200:
                    break
            assert count == 200

    def test_newton_divergence_error_carries_the_point(self, trailer):
        # at this phase point the principal-branch stationary point is a
        # saddle, so no admissible control exists near the guess
        th = true_hamiltonian(trailer)
        t = trailer.table
        pt = {t.state(1): 0.6952, t.state(2): -0.1975, t.state(3): 0.1065,
              t.state(4): -0.04102, t.costate(1): 0.917, t.costate(2): -0.3654,
              t.costate(3): -0.1958, t.costate(4): -0.9982, t.time: 0.4202}
        with pytest.raises(ocp.NewtonDivergenceError) as exc:
            th.evaluator().value_and_gradient(pt)
        assert exc.value.point is not None

    def test_implicit_stationarity_on_samples(self, trailer):
        # points come from the sampler: phase points with no concave
        # stationary control (they exist for the trailer) are out of domain
        th = true_hamiltonian(trailer)
        ev = th.evaluator()
        t = trailer.table
        sampler = PointSampler(trailer, ev, np.random.default_rng(5))
        batch = sampler.draw(25)
        grads = [sx.differentiate(th.hamiltonian, u) for u in t.controls]
        for i in range(batch.size):
            full = batch.point(i)
            full.update(zip(t.controls, ev.solve_control(batch.point(i))))
            for g in grads:
                assert abs(evaluate(g, full)) <= 1e-9


class TestFlow:
    def test_free_particle(self):
        problem = scalar_problem()
        th = true_hamiltonian(problem)
        flow = th.flow()
        t = problem.table
        assert flow.symbolic["xdot"][0] == parse("psi1", t)
        assert flow.symbolic["psidot"][0] == sx.num(0)
        rhs = flow.rhs(0.0, np.array([0.0, 1.0]))
        assert np.allclose(rhs, [1.0, 0.0])

    def test_dubins_adjoint_component(self, dubins):
        th = true_hamiltonian(dubins)
        flow = th.flow()
        t = dubins.table
        expected = parse(
            "(cos(x3)*psi1 + sin(x3)*psi2) * (sin(x3)*psi1 - cos(x3)*psi2)",
            t)
        got = flow.symbolic["psidot"][2]
        for pt in phase_points(dubins, 30, seed=6):
            assert abs(evaluate(got, pt) - evaluate(expected, pt)) < 1e-12


class TestAutonomize:
    def test_structure_and_zero_level(self, dubins):
        th = true_hamiltonian(dubins)
        k, table = autonomize(th)
        theta = table.autonomization
        assert k == sx.add(th.reduced, sx.negate(sx.symref(theta)))
        pt = phase_points(dubins, 1, seed=7)[0]
        value = evaluate(th.reduced, pt)
        pt_ext = dict(pt)
        pt_ext[theta] = value
        assert abs(evaluate(k, pt_ext)) < 1e-15

    def test_requires_closed_form(self, trailer):
        th = true_hamiltonian(trailer)
        with pytest.raises(OcpError):
            autonomize(th)


class TestSampler:
    def test_respects_exclusions_and_box(self, martinet):
        th = true_hamiltonian(martinet)
        sampler = PointSampler(martinet, th.evaluator(), np.random.default_rng(0))
        batch = sampler.draw(200)
        assert batch.size == 200
        x1 = batch.column(martinet.table.state(1))
        assert np.all(np.abs(1 + x1) >= 0.1)
        for s in martinet.table.phase:
            col = batch.column(s)
            assert np.all(col >= -1.0) and np.all(col <= 1.0)

    def test_deterministic_under_seed(self, dubins):
        th = true_hamiltonian(dubins)
        b1 = PointSampler(dubins, th.evaluator(), np.random.default_rng(9)).draw(50)
        b2 = PointSampler(dubins, th.evaluator(), np.random.default_rng(9)).draw(50)
        for s in dubins.table.phase:
            assert np.array_equal(b1.column(s), b2.column(s))
        assert np.array_equal(b1.hvalue, b2.hvalue)

    def test_implicit_batch_matches_scalar(self, trailer):
        th = true_hamiltonian(trailer)
        ev = th.evaluator()
        sampler = PointSampler(trailer, ev, np.random.default_rng(1))
        batch = sampler.draw(20)
        for i in range(batch.size):
            pt = batch.point(i)
            value, grad = th.evaluator().value_and_gradient(pt)
            assert abs(value - batch.hvalue[i]) < 1e-10
            for s, g in batch.hgrad.items():
                assert abs(g[i] - grad[s]) < 1e-8


class TestProblemValidation:
    def test_dynamics_count(self):
        doc = builtin("dubins")
        doc["dynamics"] = doc["dynamics"][:2]
        from ocquad.problems import ProblemFileError
        with pytest.raises(ProblemFileError, match="dynamics"):
            load_problem(doc)

    def test_costates_forbidden_in_dynamics(self):
        doc = builtin("dubins")
        doc["dynamics"][0] = "psi1"
        with pytest.raises(OcpError, match="costate"):
            load_problem(doc)
