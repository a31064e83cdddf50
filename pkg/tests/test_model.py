import numpy as np
import pytest

from hydrovpp.model import (INFEASIBLE, OPTIMAL, BackendUnsupported,
                            ModelBuilder, SolveOptions, export_lp,
                            fix_variables, key_name, load_spec,
                            relax_integrality, save_spec, solve)


def small_milp():
    mb = ModelBuilder()
    x = mb.add_var(("x",), 0, 5, integer=True)
    y = mb.add_var(("y",), 0, 5)
    mb.add_row([(x, 1.0), (y, 1.0)], "<=", 3.5)
    mb.obj_linear(x, -1.0)
    mb.obj_linear(y, -2.0)
    return mb.build(), x, y


def test_min_with_lower_bound():
    mb = ModelBuilder()
    x = mb.add_var(("x",), -np.inf, np.inf)
    mb.add_row([(x, 1.0)], ">=", 3.0)
    mb.obj_linear(x, 1.0)
    res = solve(mb.build())
    assert res.status == OPTIMAL
    assert res.objective == pytest.approx(3.0)


def test_integrality_rounds_up():
    mb = ModelBuilder()
    x = mb.add_var(("x",), 0, 1, integer=True)
    mb.add_row([(x, 1.0)], ">=", 0.5)
    mb.obj_linear(x, 1.0)
    res = solve(mb.build())
    assert res.status == OPTIMAL
    assert res.x[0] == pytest.approx(1.0)


def test_infeasible_status():
    mb = ModelBuilder()
    x = mb.add_var(("x",), -np.inf, np.inf)
    mb.add_row([(x, 1.0)], ">=", 1.0)
    mb.add_row([(x, 1.0)], "<=", 0.0)
    mb.obj_linear(x, 1.0)
    assert solve(mb.build()).status == INFEASIBLE


def test_milp_best_bound_present():
    spec, _, _ = small_milp()
    res = solve(spec)
    assert res.status == OPTIMAL
    assert res.best_bound is not None
    assert res.best_bound <= res.objective + 1e-9


def test_relax_integrality_is_identity_on_lp():
    mb = ModelBuilder()
    mb.add_var(("x",), 0, 1)
    spec = mb.build()
    relaxed = relax_integrality(spec)
    assert not relaxed.integer.any()
    assert relaxed.A.shape == spec.A.shape


def test_relaxation_below_milp():
    spec, _, _ = small_milp()
    milp_res = solve(spec)
    lp_res = solve(relax_integrality(spec))
    assert lp_res.objective <= milp_res.objective + 1e-9


def test_fix_variables_pins_and_clears_flags():
    spec, x, y = small_milp()
    fixed = fix_variables(spec, {x: 2.0})
    assert fixed.col_lb[x] == fixed.col_ub[x] == 2.0
    assert not fixed.integer[x]
    res = solve(fixed)
    assert res.x[x] == pytest.approx(2.0)
    # fixing all binaries of a MILP yields an LP
    assert not fix_variables(spec, {x: 1.0}).integer.any()


def test_fix_variable_outside_bounds_rejected():
    spec, x, _ = small_milp()
    with pytest.raises(ValueError):
        fix_variables(spec, {x: 9.0})
    with pytest.raises(ValueError):
        fix_variables(spec, {x: 0.5})   # non-integral on an integer column


def test_fixed_binary_lp_above_milp():
    # any feasible integer pin restricts, so its optimum cannot be lower
    spec, x, _ = small_milp()
    base = solve(spec).objective
    for v in (0.0, 1.0, 2.0, 3.0):
        res = solve(fix_variables(spec, {x: v}))
        if res.status == OPTIMAL:
            assert res.objective >= base - 1e-9


def test_quadratic_objective_solves():
    mb = ModelBuilder()
    x = mb.add_var(("x",), -10, 10)
    mb.obj_quadratic(x, 2.0)        # 0.5*2*x^2 = x^2
    mb.obj_linear(x, -4.0)          # min at x = 2
    res = solve(mb.build())
    assert res.status == OPTIMAL
    assert res.x[0] == pytest.approx(2.0, abs=1e-6)


def test_miqp_unsupported():
    mb = ModelBuilder()
    x = mb.add_var(("x",), 0, 1, integer=True)
    mb.obj_quadratic(x, 1.0)
    with pytest.raises(BackendUnsupported):
        solve(mb.build())


def test_integer_needs_finite_bounds():
    mb = ModelBuilder()
    with pytest.raises(ValueError):
        mb.add_var(("x",), 0, np.inf, integer=True)


def test_duplicate_key_rejected():
    mb = ModelBuilder()
    mb.add_var(("x", 0), 0, 1)
    with pytest.raises(ValueError):
        mb.add_var(("x", 0), 0, 1)


def test_key_names():
    assert key_name(("qtr", 1, 0, 5)) == "qtr[1][0][5]"
    assert key_name(("boc", 2, 1, 7, 3)) == "boc[2][1][7][3]"


def test_roundtrip_preserves_solve(tmp_path, desk2):
    from hydrovpp.centralized import assemble_centralized
    cascade, scenarios = desk2
    spec = assemble_centralized(cascade, scenarios).spec
    path = tmp_path / "spec.npz"
    save_spec(spec, str(path))
    loaded = load_spec(str(path))
    a = solve(spec, SolveOptions())
    b = solve(loaded, SolveOptions())
    assert a.status == b.status == OPTIMAL
    assert abs(a.objective - b.objective) <= 1e-9 * max(1.0, abs(a.objective))
    assert loaded.keys == spec.keys


def test_deterministic_build_and_solve(desk2):
    from hydrovpp.centralized import assemble_centralized
    cascade, scenarios = desk2
    s1 = assemble_centralized(cascade, scenarios).spec
    s2 = assemble_centralized(cascade, scenarios).spec
    assert (s1.A != s2.A).nnz == 0
    assert np.array_equal(s1.c, s2.c)
    r1, r2 = solve(s1), solve(s2)
    assert r1.objective == r2.objective


def test_lp_export(tmp_path):
    spec, _, _ = small_milp()
    path = tmp_path / "m.lp"
    export_lp(spec, str(path))
    text = path.read_text()
    assert text.startswith("Minimize")
    assert "Generals" in text and "End" in text
