import math

import numpy as np
import pytest

from modlc.interp import (
    InterpError,
    Runner,
    compare_pipelines,
    diff_trajectories,
    init,
    lu_solve_batched,
    permutation_invariant,
    simulate,
)
from modlc.pipeline import compile_source

CNEXP_ONE_STEP_TRUE = 0.024690087971667333  # 1 - exp(-0.025), 50-digit arithmetic


def layout_of(src, passes=(), **kw):
    return compile_source(src, passes=passes, **kw).layout


GATE_SRC = """
NEURON { SUFFIX gate }
STATE { y }
BREAKPOINT { SOLVE dy METHOD cnexp }
INITIAL { y = 0 }
DERIVATIVE dy { y' = (1 - y)/1 }
"""

TWO_STATE_SRC = """
NEURON { SUFFIX ts\n RANGE kf, kb }
PARAMETER { kf = 2 (/ms)\n kb = 1 (/ms) }
STATE { A B }
BREAKPOINT { SOLVE scheme METHOD sparse }
INITIAL { A = 1\n B = 0 }
KINETIC scheme {
    ~ A <-> B (kf, kb)
    CONSERVE A + B = 1
}
"""


def test_init_deterministic_per_seed(cat_path):
    layout = layout_of(cat_path.read_text())
    a = init(layout, 16, seed=7)
    b = init(layout, 16, seed=7)
    for name in a.arrays:
        assert np.array_equal(a.arrays[name], b.arrays[name])
    c = init(layout, 16, seed=8)
    assert any(not np.array_equal(a.arrays[n], c.arrays[n]) for n in a.arrays)


def test_init_parameter_defaults_everywhere(cat_path):
    layout = layout_of(cat_path.read_text())
    data = init(layout, 32, seed=1)
    assert np.all(data.arrays["gcatbar"] == 0.003)


def test_init_singleton():
    layout = layout_of(GATE_SRC)
    data = init(layout, 1, seed=0)
    assert all(arr.shape == (1,) for arr in data.arrays.values())


def test_init_documented_ranges(cat_path):
    layout = layout_of(cat_path.read_text())
    data = init(layout, 512, seed=3)
    assert np.all((data.arrays["v"] >= -80) & (data.arrays["v"] <= 40))
    assert np.all((data.arrays["m"] >= 0) & (data.arrays["m"] <= 1))
    assert np.all((data.arrays["eca"] >= -100) & (data.arrays["eca"] <= 100))
    assert np.all(data.arrays["ica"] == 0.0)


def test_cnexp_one_step_value():
    layout = layout_of(GATE_SRC)
    data = init(layout, 4, seed=0)
    runner = Runner(layout)
    runner.run_kernel(data, "initialize", 1)
    assert np.all(data.arrays["y"] == 0.0)
    runner.run_kernel(data, "state_update", 1)
    assert np.allclose(data.arrays["y"], CNEXP_ONE_STEP_TRUE, rtol=1e-13, atol=0)


def test_two_state_equilibrium_and_conservation():
    layout = layout_of(TWO_STATE_SRC)
    data = init(layout, 8, seed=0)
    runner = Runner(layout)
    runner.run_kernel(data, "initialize", 1)
    for _ in range(2000):
        runner.run_kernel(data, "state_update", 1)
        total = data.arrays["A"] + data.arrays["B"]
        assert np.max(np.abs(total - 1.0)) <= 1e-12
    # analytic equilibrium: A -> kb/(kf+kb) = 1/3, B -> 2/3
    assert np.allclose(data.arrays["A"], 1.0 / 3.0, atol=1e-9)
    assert np.allclose(data.arrays["B"], 2.0 / 3.0, atol=1e-9)


def test_zero_steps_leaves_data_unchanged():
    layout = layout_of(GATE_SRC)
    data = init(layout, 4, seed=0)
    before = data.copy()
    Runner(layout).run_kernel(data, "state_update", 0)
    assert diff_trajectories(before, data) == 0.0


def test_diff_trajectories_identity_and_perturbation():
    layout = layout_of(GATE_SRC)
    data = init(layout, 4, seed=0)
    assert diff_trajectories(data, data.copy()) == 0.0
    other = data.copy()
    other.arrays["y"][:] = 1.0
    data.arrays["y"][:] = 1.0
    other.arrays["y"][2] = 1.0 + 1e-13
    dev = diff_trajectories(data, other)
    assert dev == pytest.approx(1e-13, rel=1e-2)


def test_diff_trajectories_layout_mismatch():
    a = init(layout_of(GATE_SRC), 4, seed=0)
    b = init(layout_of(TWO_STATE_SRC), 4, seed=0)
    with pytest.raises(InterpError):
        diff_trajectories(a, b)


def test_while_cap_raises():
    src = """
NEURON { SUFFIX spin }
ASSIGNED { w }
INITIAL { w = 1\n WHILE (w > 0) { w = w + 1 } }
"""
    layout = layout_of(src)
    data = init(layout, 2, seed=0)
    with pytest.raises(InterpError) as err:
        Runner(layout).run_kernel(data, "initialize", 1)
    assert "WHILE" in str(err.value)


def test_nonfinite_aborts_with_instance_index():
    src = """
NEURON { SUFFIX blow }
ASSIGNED { w v }
INITIAL { w = exp(v*v) }
"""
    layout = layout_of(src)
    data = init(layout, 8, seed=0)
    data.arrays["v"][:] = 1.0
    data.arrays["v"][5] = 1e6
    with pytest.raises(InterpError) as err:
        Runner(layout).run_kernel(data, "initialize", 1)
    assert "instance 5" in str(err.value)


def test_newton_nonconvergence_reports_instance():
    src = """
NEURON { SUFFIX stiff }
STATE { y }
BREAKPOINT { SOLVE d METHOD derivimplicit }
INITIAL { y = 0.5 }
DERIVATIVE d { y' = y*y }
"""
    layout = layout_of(src)
    data = init(layout, 4, seed=0)
    runner = Runner(layout)
    runner.run_kernel(data, "initialize", 1)
    data.arrays["y"][:] = 1.0
    data.scalars["dt"] = 1e4  # far outside the contraction region
    with pytest.raises(InterpError) as err:
        runner.run_kernel(data, "state_update", 1)
    assert "Newton failed to converge" in str(err.value)


def test_newton_iteration_counts_exact_vs_fd(corpus):
    path = next(p for p in corpus if p.name == "cacum.mod")
    layout = layout_of(path.read_text())
    exact_data = init(layout, 64, seed=5)
    fd_data = init(layout, 64, seed=5)
    simulate(layout, exact_data, 50, jac_mode="exact")
    simulate(layout, fd_data, 50, jac_mode="fd")
    assert exact_data.newton_iters and fd_data.newton_iters
    assert max(exact_data.newton_iters) <= 50
    assert max(fd_data.newton_iters) <= 50
    # states still agree: both iterate to the 1e-12 residual tolerance
    assert diff_trajectories(exact_data, fd_data, ["cai"]) <= 1e-9


def test_lu_solve_batched_against_numpy():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(32, 5, 5))
    b = rng.normal(size=(32, 5))
    x = lu_solve_batched(a, b)
    expected = np.linalg.solve(a, b[..., None])[..., 0]
    assert np.allclose(x, expected, rtol=1e-10, atol=1e-12)


def test_permutation_invariance_on_gate():
    layout = layout_of(GATE_SRC)
    assert permutation_invariant(layout, 64, seed=11, steps=20) == 0.0


def test_compare_pipelines_is_zero_for_identical_layouts(cat_path):
    layout = layout_of(cat_path.read_text())
    dev = compare_pipelines(layout, layout, 32, seed=42, steps=10)
    assert dev == 0.0


def test_global_scalar_write_uses_last_lane():
    src = """
NEURON { SUFFIX glb\n GLOBAL shared }
ASSIGNED { shared v w }
INITIAL { shared = v\n w = shared }
"""
    layout = layout_of(src)
    data = init(layout, 8, seed=0)
    Runner(layout).run_kernel(data, "initialize", 1)
    assert data.scalars["shared"] == data.arrays["v"][-1]
    assert np.all(data.arrays["w"] == data.arrays["v"][-1])
