import numpy as np
import pytest

from elasticdtn.dtn import ForwardMap, star_norm
from elasticdtn.errors import ConfigurationError, DomainError
from elasticdtn.invert import (InversionConfig, active_mask, landweber, relative_error,
                               stability_consistency, synthesize_data)
from elasticdtn.material import ConstraintSet, ParamVector


@pytest.fixture(scope="module")
def truth():
    return ParamVector.from_parts([1.0, 0.6], [1.0, 1.5], [1.0, 1.5])


@pytest.fixture(scope="module")
def setup(mesh_x4, omega_max_x4, truth):
    omega = 0.7 * omega_max_x4
    F = ForwardMap(mesh_x4, omega)
    return mesh_x4, omega, F, F(truth)


def start(truth, mode, scale=1.2):
    x = np.asarray(truth)
    return ParamVector(np.where(active_mask(mode, truth.n), scale * x, x))


def test_start_at_truth_returns_immediately(setup, truth, prior2, omega_max_x4):
    m, omega, F, data = setup
    l, tr = landweber(m, data, InversionConfig(l0=truth), omega, prior2, omega_max=omega_max_x4,
                      forward=F)
    assert len(tr) == 1 and tr.stop_reason in ("gradient", "misfit_floor")
    assert l == truth


@pytest.mark.parametrize("mode", ["FULL", "S1", "S2"])
def test_noiseless_recovery(setup, truth, prior2, omega_max_x4, mode):
    m, omega, F, data = setup
    l0 = start(truth, mode)
    l, tr = landweber(m, data, InversionConfig(mode=mode, l0=l0), omega, prior2,
                      omega_max=omega_max_x4, forward=F)
    assert relative_error(l, truth) <= 1e-3
    K = ConstraintSet(prior2)
    assert all(K.contains(ParamVector(r.params)) for r in tr.records)
    frozen = ~active_mask(mode, 2)
    assert np.asarray(l)[frozen].tobytes() == np.asarray(l0)[frozen].tobytes()


def test_backtracking_decreases_misfit(setup, truth, prior2, omega_max_x4):
    m, omega, F, data = setup
    cfg = InversionConfig(step_rule="backtracking", l0=start(truth, "FULL", 1.05), max_iter=15)
    _, tr = landweber(m, data, cfg, omega, prior2, omega_max=omega_max_x4, forward=F)
    f = tr.misfits
    assert all(b < a for a, b in zip(f, f[1:]))


def test_fixed_step_is_monotone_for_small_steps(setup, truth, prior2, omega_max_x4):
    m, omega, F, data = setup
    cfg = InversionConfig(step_rule="fixed", l0=start(truth, "S1", 1.05), mode="S1", max_iter=10)
    _, tr = landweber(m, data, cfg, omega, prior2, omega_max=omega_max_x4, forward=F)
    f = tr.misfits
    assert f[-1] < f[0]
    assert "iteration" in tr.to_csv().splitlines()[0]


def test_full_no_worse_than_restrictions(setup, truth, prior2, omega_max_x4):
    m, omega, F, data = setup
    errs = {}
    for mode in ("FULL", "S1", "S2"):
        l, _ = landweber(m, data, InversionConfig(mode=mode, l0=start(truth, mode)), omega, prior2,
                         omega_max=omega_max_x4, forward=F)
        errs[mode] = relative_error(l, truth)
    assert errs["FULL"] <= 10 * max(errs["S1"], errs["S2"]) + 1e-12


def test_domain_checks(setup, truth, prior2, omega_max_x4):
    m, omega, F, data = setup
    with pytest.raises(DomainError):
        landweber(m, data, InversionConfig(mode="S2"), 0.0, prior2)
    with pytest.raises(DomainError):
        landweber(m, data, InversionConfig(), 0.1 * omega_max_x4, prior2, omega_max=omega_max_x4)
    with pytest.raises(DomainError):
        landweber(m, data, InversionConfig(), 1.5 * omega_max_x4, prior2, omega_max=omega_max_x4)
    with pytest.raises(ConfigurationError):
        landweber(m, data, InversionConfig(l0=ParamVector.from_parts([9, 9], [9, 9], [9, 9])),
                  omega, prior2)
    with pytest.raises(ConfigurationError):
        InversionConfig(tau_disc=0.5).validate(prior2)


def test_synthesize_data(setup, truth):
    m, omega, F, clean = setup
    assert synthesize_data(m, truth, omega, 0.0, forward=F) is clean
    a = synthesize_data(m, truth, omega, 0.01, seed=4, forward=F)
    b = synthesize_data(m, truth, omega, 0.01, seed=4, forward=F)
    assert a.entries.tobytes() == b.entries.tobytes()
    rel = star_norm(a.entries - clean.entries, clean.metric) / clean.star_norm()
    assert abs(rel - 0.01) <= 1e-6


def test_stability_table(setup, truth, prior2, omega_max_x4):
    m, omega, F, data = setup
    cfg = InversionConfig(l0=start(truth, "FULL"))
    tab = stability_consistency(m, prior2, truth, omega, [0.0, 1e-3, 1e-2], cfg,
                                omega_max=omega_max_x4)
    l, _ = landweber(m, data, cfg, omega, prior2, omega_max=omega_max_x4, forward=F)
    assert tab.rows[0].error == relative_error(l, truth)
    errs = [r.error for r in tab.rows]
    assert errs[1] <= errs[2] * 1.2 and errs[0] <= errs[1] * 1.2
    assert tab.bound_holds()
