import numpy as np

from divfree.common import GridConfig
from divfree.appendix_verification import (
    CheckResult,
    THRESHOLDS,
    format_table,
    mode_rank_report,
    run_verification,
    smooth_random_field,
    verify_riemann_field,
    verify_tensor_helmholtz,
)
from divfree.microstructure import make_rng


def test_checks_pass_on_a_hundred_trials():
    results, ranks = run_verification(trials=100, seed=0, n_dis=16)
    assert {r.name for r in results} == set(THRESHOLDS)
    assert all(r.trials == 100 for r in results)
    assert all(r.passed for r in results), format_table(results, ranks)
    assert ranks == {"image_riemann": [3], "image_nonsym": [4], "image_curl": [6]}


def test_threads_do_not_change_results():
    a, _ = run_verification(trials=4, seed=5, n_dis=8, threads=1)
    b, _ = run_verification(trials=4, seed=5, n_dis=8, threads=3)
    assert [r.worst for r in a] == [r.worst for r in b]


def test_parameter_counts():
    ranks = mode_rank_report(np.array([1.0, 2.0, 0.0]))
    assert ranks["dof_riemann"] == 6
    assert ranks["dof_nonsym"] == 9


def test_helmholtz_with_constant_potential_is_divergence_free():
    grid = GridConfig(n_dis=8)
    rng = make_rng(1)
    phi = np.broadcast_to(rng.standard_normal(3), (8, 8, 3)).copy()
    report = verify_tensor_helmholtz(phi, smooth_random_field(rng, grid), grid)
    assert report.rel_divergence <= 1e-11
    assert report.reconstruction_error <= 1e-11


def test_riemann_field_is_symmetric():
    grid = GridConfig(n_dis=8)
    M = smooth_random_field(make_rng(2), grid)
    report = verify_riemann_field(0.5 * (M + np.swapaxes(M, -1, -2)), grid)
    assert report.rel_asymmetry <= 1e-12
    assert report.rel_divergence <= 1e-11


def test_smooth_field_is_band_limited():
    grid = GridConfig(n_dis=16)
    f = smooth_random_field(make_rng(3), grid, shape=(3,), bandwidth=2)
    spectrum = np.abs(np.fft.rfft2(f, axes=(0, 1)))
    assert spectrum[4:13].max() <= 1e-10 * spectrum.max()
    assert spectrum[:, 2:].max() <= 1e-10 * spectrum.max()


def test_table_marks_failures():
    table = format_table([CheckResult("x", 2, 1.0, 0.5), CheckResult("y", 2, 0.1, 0.5)])
    lines = table.splitlines()
    assert lines[1].endswith("FAIL")
    assert lines[2].endswith("PASS")
