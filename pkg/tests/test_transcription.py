import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from sasa_uccd.problem import default_instance
from sasa_uccd.transcription import (
    KKT_TOL,
    DimensionError,
    InvalidOptionError,
    OcpSolution,
    ProgramSolver,
    assemble_ocp,
    dump_triplets,
    read_triplets,
    soften_inequalities,
    solve_ocp,
    stack_programs,
    switch_time,
)

MU_CCD = 3.326


@pytest.fixture(scope="module")
def cfg():
    return default_instance()


@pytest.fixture(scope="module")
def ccd_solution(cfg):
    return solve_ocp(assemble_ocp(cfg, MU_CCD, 1.0, 0.0, stationarity_k=MU_CCD))


@pytest.mark.parametrize("terminal, n_eq", [(True, 201), (False, 200)])
def test_program_dimensions(cfg, terminal, n_eq):
    p = assemble_ocp(cfg, 3.0, 1.0, 0.0, terminal_velocity_eq=terminal)
    assert p.n_vars == 300
    assert p.Aeq.shape == (n_eq, 300)
    assert p.A.shape[0] == 0


def test_stationarity_row(cfg):
    p = assemble_ocp(cfg, 3.0, 1.0, 0.0, stationarity_k=2.5)
    assert p.A.shape == (1, 300)
    assert p.A[0, p.layout["xi1"][-1]] == 2.5
    assert p.b[0] == cfg.u_max


def test_linear_state_satisfies_defects_exactly(cfg):
    p = assemble_ocp(cfg, 0.0, 1.0, 1.0, terminal_velocity_eq=False)
    x = np.zeros(p.n_vars)
    x[p.layout["xi1"]] = p.times
    x[p.layout["xi2"]] = 1.0
    # zero up to round-off in the grid times
    assert np.max(np.abs(p.Aeq @ x - p.beq)) <= 4 * np.finfo(float).eps


def test_option_errors(cfg):
    with pytest.raises(DimensionError):
        assemble_ocp(cfg, 3.0, 1.0, 0.0, n_nodes=1)
    with pytest.raises(InvalidOptionError):
        assemble_ocp(cfg, 3.0, 1.0, 0.0, terminal_velocity_eq=True, terminal_penalty_weight=10.0)


def test_ccd_program_objective(ccd_solution):
    assert ccd_solution.ok
    assert ccd_solution.objective == pytest.approx(-0.301, abs=0.002)


def test_ccd_solution_is_bang_bang(cfg, ccd_solution):
    u = ccd_solution.u
    at_bound = np.isclose(u, cfg.u_max, atol=1e-6) | np.isclose(u, cfg.u_min, atol=1e-6)
    assert at_bound.mean() >= 0.95
    assert u[0] == pytest.approx(cfg.u_max) and u[-1] == pytest.approx(cfg.u_min)


def test_ccd_switch_time(cfg, ccd_solution):
    assert switch_time(ccd_solution, cfg) == pytest.approx(0.727, abs=0.01)


def test_optimal_solutions_meet_residual_tolerance(ccd_solution):
    assert ccd_solution.defect_residual <= 1e-8
    assert ccd_solution.kkt_residual <= KKT_TOL
    assert abs(ccd_solution.xi2[-1]) <= 1e-8


def test_matches_independent_interior_point_solve(cfg):
    p = assemble_ocp(cfg, 2.0, 1.3, 0.05, stationarity_k=2.0)
    ref = linprog(p.f, A_ub=p.A, b_ub=p.b, A_eq=p.Aeq, b_eq=p.beq,
                  bounds=list(zip(p.lb, p.ub)), method="highs-ipm")
    sol = solve_ocp(p)
    assert ref.status == 0
    assert sol.objective == pytest.approx(ref.fun, abs=1e-7)


def test_contradictory_terminal_rows_are_infeasible(cfg):
    p = assemble_ocp(cfg, 3.0, 1.0, 0.0)
    row = sp.csr_matrix(([1.0], ([0], [p.layout["xi2"][-1]])), shape=(1, p.n_vars))
    bad = dataclasses.replace(p, Aeq=sp.vstack([p.Aeq, row]).tocsr(), beq=np.append(p.beq, 1.0))
    assert solve_ocp(bad).status == "infeasible"


def test_unbounded_control_is_unbounded(cfg):
    p = assemble_ocp(cfg, 3.0, 1.0, 0.0)
    free = dataclasses.replace(p, lb=np.full(p.n_vars, -np.inf), ub=np.full(p.n_vars, np.inf))
    assert solve_ocp(free).status == "unbounded"


def test_mesh_refinement(cfg):
    objs = [
        solve_ocp(assemble_ocp(cfg.replace(n_t=n), MU_CCD, 1.0, 0.0, stationarity_k=MU_CCD)).objective
        for n in (100, 200)
    ]
    assert objs[0] == pytest.approx(objs[1], abs=2e-3)


@given(a=st.floats(-0.2, 0.2), b=st.floats(-0.2, 0.2))
@settings(max_examples=25, deadline=None)
def test_assembly_is_affine_in_initial_velocity(a, b):
    cfg = default_instance()
    pa, pb = (assemble_ocp(cfg, 3.0, 1.0, v) for v in (a, b))
    pm = assemble_ocp(cfg, 3.0, 1.0, 0.5 * (a + b))
    assert (pa.Aeq != pm.Aeq).nnz == 0
    np.testing.assert_allclose(0.5 * (pa.beq + pb.beq), pm.beq, atol=1e-15)


def test_penalty_variant_is_a_qp(cfg):
    p = assemble_ocp(cfg, 3.0, 1.0, 0.0, terminal_velocity_eq=False, terminal_penalty_weight=1e3,
                     stationarity_k=3.0)
    assert p.is_quadratic and p.H.nnz == 1
    sol = solve_ocp(p)
    assert sol.ok
    hard = solve_ocp(assemble_ocp(cfg, 3.0, 1.0, 0.0, stationarity_k=3.0))
    # relaxing the terminal equality can only help
    assert sol.objective <= hard.objective + 1e-8


def test_partial_horizon_from_measured_state(cfg):
    p = assemble_ocp(cfg, 3.0, 1.0, 0.0, t_start=0.5, x_start=(0.1, 0.2), n_nodes=51)
    assert p.times[0] == 0.5 and p.times.size == 51
    sol = solve_ocp(p)
    assert sol.xi1[0] == pytest.approx(0.1) and sol.xi2[0] == pytest.approx(0.2)


def test_stacked_identical_scenarios_match_single(cfg):
    single = solve_ocp(assemble_ocp(cfg, 3.0, 1.0, 0.0, stationarity_k=3.0))
    progs = [assemble_ocp(cfg, 3.0, 1.0, 0.0, stationarity_k=3.0) for _ in range(3)]
    stacked = stack_programs(progs, shared=progs[0].layout["u"][:5])
    res = ProgramSolver().solve(stacked)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(single.objective, abs=1e-9)
    assert stacked.n_vars == 300 + 2 * 295


def test_softening_keeps_feasible_solution(cfg):
    p = assemble_ocp(cfg, 3.0, 1.0, 0.0, stationarity_k=3.0)
    soft = soften_inequalities(p, 1e4)
    res = ProgramSolver().solve(soft)
    assert res.objective == pytest.approx(solve_ocp(p).objective, abs=1e-9)
    assert res.x[soft.layout["slack"]] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize(
    "u, expected",
    [
        (np.ones(21), None),
        (np.r_[np.ones(11), -np.ones(10)], 1.05),
        (np.r_[-np.ones(5), np.ones(16)], 0.45),
    ],
)
def test_switch_time_synthetic(cfg, u, expected):
    t = np.linspace(0.0, 2.0, 21)
    sol = OcpSolution(t, np.zeros(21), np.zeros(21), u, 0.0, "optimal")
    got = switch_time(sol, cfg)
    if expected is None:
        assert got is None
    else:
        assert got == pytest.approx(expected, abs=1e-12)


def test_triplet_round_trip(cfg, tmp_path):
    p = assemble_ocp(cfg, 3.0, 1.2, 0.01, stationarity_k=3.0)
    dump_triplets(p, tmp_path / "p.txt")
    back = read_triplets(tmp_path / "p.txt")
    assert abs(back["Aeq"] - p.Aeq).max() == 0
    assert abs(back["A"] - p.A).max() == 0
    np.testing.assert_array_equal(back["f"], p.f)
    np.testing.assert_array_equal(back["Aeq_rhs"], p.beq)
    np.testing.assert_array_equal(back["lb"], p.lb)
    np.testing.assert_array_equal(back["ub"], p.ub)
