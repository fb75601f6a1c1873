import json
import math

import numpy as np
import pytest

from qgc.model import (
    ForwardModel,
    constant_model,
    preset_qg_2d,
    preset_terminal,
    preset_two_rate,
    zero_driver,
)
from qgc.oracle import QuadratureSpec, black_scholes_call, qg_closed_form
from qgc.solver import (
    SolveReport,
    SolverConfig,
    StepStats,
    backward_sweep,
    eval_solution,
    stability_check,
    threads_from_env,
)

SET1 = QuadratureSpec(a=1.0)


def square():
    return preset_terminal("custom", fn=lambda x: x[:, 0] ** 2)


def set1(n, **kw):
    model, drv = preset_qg_2d(0.05, 0.05, 0.5, 0.5, 0.3, 1.0)
    cfg = SolverConfig(n=n, x0=(1.0, 1.0), zeta=1.5, log_coords=True, **kw)
    return backward_sweep(model, drv, preset_terminal("sin2"), cfg)


def test_config_validation():
    for bad in (dict(n=0), dict(n=1, zeta=0), dict(n=1, nu=0.3), dict(n=1, T=0)):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


def test_deterministic_flow_linear_drift():
    model = ForwardModel(d=1, b=lambda t, x: 0.05 * x, sigma=lambda t, x: np.zeros((len(x), 1, 1)),
                         db_dx=lambda t, x: np.full((len(x), 1, 1), 0.05), affine_drift=True)
    rep = backward_sweep(model, zero_driver(), square(), SolverConfig(n=1, x0=(1.0,), zeta=0.3))
    assert rep.y0 == pytest.approx(1.05**2, abs=1e-12)


def test_deterministic_flow_constant_drift():
    model = constant_model(1, drift=[0.3])
    xi = preset_terminal("custom", fn=lambda x: np.sin(3 * x[:, 0]))
    rep = backward_sweep(model, zero_driver(), xi, SolverConfig(n=1, x0=(0.2,), zeta=0.7))
    assert rep.y0 == pytest.approx(math.sin(3 * 0.5), abs=1e-12)


@pytest.mark.parametrize("s,T,x0", [(0.4, 1.0, 0.3), (1.3, 2.0, -1.0)])
def test_gaussian_second_moment(s, T, x0):
    model = constant_model(1, vol=[[s]])
    rep = backward_sweep(model, zero_driver(), square(), SolverConfig(n=1, T=T, x0=(x0,)))
    assert rep.y0 == pytest.approx(x0 * x0 + s * s * T, abs=1e-12)
    assert rep.z0[0] == pytest.approx(2 * x0 * s, abs=1e-12)


def test_report_shape_and_bound():
    rep = set1(10)
    assert len(rep.per_step) == 10
    assert [s.i for s in rep.per_step] == list(range(1, 11))
    assert math.isfinite(rep.y0) and not rep.divergent
    assert abs(rep.y0) <= 6 + 1e-8
    assert rep.z0.shape == (2,)


def test_set1_error_decreases():
    ref = qg_closed_form(SET1)
    e10 = abs(set1(10).y0 - ref)
    e100 = abs(set1(100).y0 - ref)
    assert e100 < e10


def test_thread_count_does_not_change_result():
    a = set1(20, threads=1)
    b = set1(20, threads=3)
    assert a.y0 == b.y0
    assert np.array_equal(a.z0, b.z0)
    assert [s.orders() for s in a.per_step] == [s.orders() for s in b.per_step]


def test_region_modes_agree_on_smooth_problem():
    dep = set1(20)
    cube = set1(20, region="cube")
    assert cube.y0 == pytest.approx(dep.y0, rel=1e-6)


def test_two_rate_dominates_lending_price():
    model, drv = preset_two_rate(0.06, 0.3, 0.01, 0.06)
    low = black_scholes_call(100, 106, 0.3, 0.01, 1.0)
    for n in (10, 50):
        rep = backward_sweep(model, drv, preset_terminal("call", K=106),
                             SolverConfig(n=n, x0=(100.0,), zeta=0.6, log_coords=True))
        assert rep.y0 >= low * (1 - 1e-6)


def test_zero_driver_refinement():
    # f = 0 with drift mu gives E[xi(X_T)] = e^{mu T} * BS(rate = mu)
    mu, s = 0.05, 0.3
    model, _ = preset_two_rate(mu, s, 0.0, 0.0)
    exact = math.exp(mu) * black_scholes_call(100, 100, s, mu, 1.0)
    errs = []
    for n in (20, 40, 80):
        rep = backward_sweep(model, zero_driver(), preset_terminal("call", K=100),
                             SolverConfig(n=n, x0=(100.0,), zeta=2 * s, log_coords=True))
        errs.append(abs(rep.y0 - exact))
    assert errs[2] < errs[0]
    assert abs(errs[1] - errs[0]) <= 2 * errs[0]


def test_untruncated_large_a_diverges():
    model, drv = preset_qg_2d(0.05, 0.05, 0.5, 0.5, 0.3, 8.0)
    rep = backward_sweep(model, drv, preset_terminal("sin2"),
                         SolverConfig(n=20, x0=(1.0, 1.0), zeta=1.5, log_coords=True))
    assert rep.divergent and math.isnan(rep.y0)
    assert rep.divergence_at["i"] >= 1 and len(rep.divergence_at["x"]) == 2
    assert not stability_check([set1(10), set1(15), _relabel(rep, set1(10))]).stable


def _relabel(rep, like):
    rep.problem = like.problem
    rep.config = dict(rep.config, n=30)
    return rep


def test_eval_solution():
    rep = set1(8, keep_grids=True)
    y, z = eval_solution(rep, 0.0, [1.0, 1.0])
    assert y == rep.y0
    np.testing.assert_array_equal(z, rep.z0)
    y, z = eval_solution(rep, 1.0, [0.3, 0.9])
    assert y == pytest.approx(3 * (math.sin(0.3) ** 2 + math.sin(0.9) ** 2))
    assert np.all(z == 0)
    ya, za = eval_solution(rep, 0.51, [1.1, 1.0])
    yb, zb = eval_solution(rep, 0.61, [1.1, 1.0])
    assert ya == yb and np.array_equal(za, zb)
    with pytest.raises(NotImplementedError):
        eval_solution(set1(4), 0.0, [1.0, 1.0])


def test_json_round_trip():
    rep = set1(5)
    doc = json.loads(rep.to_json())
    again = SolveReport.from_dict(doc)
    assert again.y0 == rep.y0
    assert np.array_equal(again.z0, rep.z0)
    assert [s.orders() for s in again.per_step] == [s.orders() for s in rep.per_step]
    assert f"{rep.y0:.17g}" in rep.to_json()


def _synthetic(n, maxima, problem=None):
    steps = [StepStats(i, *maxima) for i in range(1, n + 1)]
    return SolveReport(y0=1.0, z0=np.zeros(1), per_step=steps, runtime_seconds=0.0,
                       config={"n": n}, problem=problem or {"p": 1})


def test_stability_synthetic():
    ns = [10, 30, 100, 300]
    assert stability_check([_synthetic(n, (1, 2, 3, 4)) for n in ns]).stable
    v = stability_check([_synthetic(n, (1, 2, 3, 0.01 * n)) for n in ns])
    assert not v.stable and v.order == 3 and v.n == 300
    assert str(v).startswith("UNSTABLE(order=3")
    with pytest.raises(ValueError):
        stability_check([_synthetic(n, (1, 1, 1, 1), {"p": n}) for n in ns])
    with pytest.raises(ValueError):
        stability_check([_synthetic(10, (1, 1, 1, 1))] * 3)
    with pytest.raises(ValueError):
        stability_check([_synthetic(n, (1, 1, 1, 1)) for n in ns[:2]])


def test_set3_stable():
    model, drv = preset_qg_2d(0.05, 0.05, 0.5, 0.5, 0.3, 3.0)
    reps = [backward_sweep(model, drv, preset_terminal("sin2"),
                           SolverConfig(n=n, x0=(1.0, 1.0), zeta=1.5, log_coords=True))
            for n in (10, 20, 50, 100)]
    assert stability_check(reps).stable


def test_threads_from_env(monkeypatch):
    monkeypatch.setenv("QGC_THREADS", "3")
    assert threads_from_env() == 3
    assert threads_from_env(2) == 2
    monkeypatch.delenv("QGC_THREADS")
    assert threads_from_env() == 1


def test_grid_dump(tmp_path):
    set1(3, dump_dir=str(tmp_path))
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"u_{i:05d}.csv" for i in range(1, 5)]
