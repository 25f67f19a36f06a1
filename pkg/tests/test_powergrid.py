import logging

import numpy as np
import pytest

from sofo.engine import AlgorithmConfig
from sofo.model import PhiDistribution
from sofo.powergrid import (
    FeederCase,
    FeederError,
    PowerFlowError,
    ProfileError,
    ProfileSet,
    build_lindistflow,
    compute_metrics,
    ieee33,
    load_case,
    load_profiles,
    run_opf_experiment,
    solve_power_flow,
    solve_power_flow_batch,
    synthetic_profiles,
    write_profiles,
    zero_curtailment_voltages,
)
from sofo.rng import RandomStream

from oracles import newton_raphson_pf, two_bus_voltage


def line_case(R=0.5, X=0.3, P=200.0, Q=100.0):
    return FeederCase([[1, 2, R, X]], [1, 2], [0.0, P], [0.0, Q], base_kv=12.66, base_mva=10.0, agents=(2,))


def chain_case():
    return FeederCase([[1, 2, 0.2, 0.1], [2, 3, 0.4, 0.3]], [1, 2, 3], [0, 50, 80], [0, 20, 30], agents=(3,))


def random_perturbation_error(case, loading, rng, scale=1e-4, trials=20):
    lin = build_lindistflow(case)
    a = case.agent_index
    S0 = loading * case.load_pu
    v0 = solve_power_flow_batch(case, S0[None], tol=1e-13).vm[0]
    worst = 0.0
    for _ in range(trials):
        d = rng.uniform(-1, 1, 2 * a.size) * scale
        S = S0.copy()
        S[a] -= d[: a.size] + 1j * d[a.size :]
        dv = (solve_power_flow_batch(case, S[None], tol=1e-13).vm[0] - v0)[a]
        worst = max(worst, np.linalg.norm(dv - lin.C @ d) / np.linalg.norm(dv))
    return worst


class TestFeederCase:
    def test_ieee33_totals(self):
        c = ieee33()
        p, q = c.load_kw
        assert c.n_nodes == 33
        np.testing.assert_allclose([p.sum(), q.sum()], [3715.0, 2300.0])
        assert c.agents == (18, 22, 25, 29, 31, 33)
        np.testing.assert_allclose(c.z_base, 12.66**2 / 10.0)

    def test_parent_precedes_child(self):
        c = ieee33()
        assert np.all(c.parent[1:] < np.arange(1, c.n_nodes))

    def test_rejects_loop(self):
        with pytest.raises(FeederError):
            FeederCase([[1, 2, 1, 1], [2, 3, 1, 1], [3, 1, 1, 1]], [1, 2, 3], [0, 1, 1], [0, 0, 0], agents=(2,))

    def test_rejects_disconnected(self):
        with pytest.raises(FeederError):
            FeederCase([[1, 2, 1, 1], [3, 3, 1, 1]], [1, 2, 3], [0, 1, 1], [0, 0, 0], agents=(2,))

    @pytest.mark.parametrize("kw", [dict(R=0.0), dict(X=-1.0)])
    def test_rejects_nonpositive_impedance(self, kw):
        with pytest.raises(FeederError):
            line_case(**kw)

    @pytest.mark.parametrize("agents", [(1,), (7,), (2, 2)])
    def test_rejects_bad_agents(self, agents):
        with pytest.raises(FeederError):
            FeederCase([[1, 2, 1, 1]], [1, 2], [0, 1], [0, 0], agents=agents)

    def test_csv_round_trip(self, tmp_path):
        (tmp_path / "b.csv").write_text("from,to,R_ohm,X_ohm\n1,2,0.5,0.3\n")
        (tmp_path / "n.csv").write_text("node,P_load_kW,Q_load_kvar\n1,0,0\n2,200,100\n")
        c = load_case(tmp_path / "b.csv", tmp_path / "n.csv", agents=(2,))
        np.testing.assert_allclose(solve_power_flow(c), solve_power_flow(line_case()))
        (tmp_path / "bad.csv").write_text("from,to,R\n1,2,0.5\n")
        with pytest.raises(FeederError):
            load_case(tmp_path / "bad.csv", tmp_path / "n.csv", agents=(2,))


class TestLinDistFlow:
    def test_single_line(self):
        c = line_case()
        lin = build_lindistflow(c)
        np.testing.assert_allclose(lin.C1, [[0.5 / c.z_base]])
        np.testing.assert_allclose(lin.C2, [[0.3 / c.z_base]])

    def test_common_path(self):
        c = chain_case()
        lin = build_lindistflow(c)
        near, far = c.index_of(2), c.index_of(3)
        np.testing.assert_allclose(lin.Rp[near, far], 0.2 / c.z_base)
        np.testing.assert_allclose(lin.Rp[far, far], 0.6 / c.z_base)
        np.testing.assert_allclose(lin.Xp[near, far], 0.1 / c.z_base)

    def test_nonnegative_symmetric(self):
        lin = build_lindistflow(ieee33())
        for M in (lin.C1, lin.C2, lin.Rp, lin.Xp):
            assert np.all(M >= 0)
            np.testing.assert_allclose(M, M.T)

    def test_nominal_voltage_within_one_percent(self):
        c = ieee33()
        lin = build_lindistflow(c)
        p, q = c.load_pu.real, c.load_pu.imag
        v_lin = lin.voltages(-p, -q)
        v = solve_power_flow(c)
        assert np.max(np.abs(v_lin - v) / v) < 0.01

    def test_offsets_match_full_model(self):
        c = ieee33()
        lin = build_lindistflow(c)
        p, q = c.load_pu.real, c.load_pu.imag
        np.testing.assert_allclose(lin.offsets(p, q), lin.voltages(-p, -q)[c.agent_index])

    def test_sensitivity_at_light_loading(self):
        err = random_perturbation_error(ieee33(), 0.1, np.random.default_rng(0))
        assert err < 0.02

    def test_sensitivity_at_nominal_loading(self):
        # known red: unit-voltage sensitivities are ~15% off at nominal loading
        err = random_perturbation_error(ieee33(), 1.0, np.random.default_rng(0))
        assert err < 0.02


class TestPowerFlow:
    def test_flat(self, backend):
        c = ieee33()
        S = np.zeros((1, c.n_nodes), dtype=complex)
        np.testing.assert_array_equal(solve_power_flow_batch(c, S, backend=backend).vm, 1.0)

    def test_two_bus_closed_form(self):
        c = line_case()
        v = solve_power_flow(c, tol=1e-13)
        z = c.z_pu[1]
        P, Q = c.load_pu[1].real, c.load_pu[1].imag
        np.testing.assert_allclose(v[1], two_bus_voltage(z.real, z.imag, P, Q), atol=1e-8)

    def test_nominal_dip(self):
        v = solve_power_flow(ieee33())
        assert 0.90 <= v.min() <= 0.95

    def test_matches_newton_raphson(self, backend):
        c = ieee33()
        rng = np.random.default_rng(1)
        for loading in (0.5, 1.0, 1.3):
            S = loading * c.load_pu * (1 + 0.2 * rng.uniform(-1, 1, c.n_nodes))
            v = solve_power_flow_batch(c, S[None], tol=1e-12, backend=backend).vm[0]
            np.testing.assert_allclose(v, newton_raphson_pf(c, S), atol=1e-9)

    def test_injections_raise_voltage(self):
        c = ieee33()
        p = -c.load_kw[0].copy()
        p[c.agent_index] += 300.0
        assert np.all(solve_power_flow(c, p, -c.load_kw[1]) >= solve_power_flow(c) - 1e-12)

    def test_divergence_raises(self):
        with pytest.raises(PowerFlowError):
            solve_power_flow(ieee33(), loading=40.0)

    def test_batch_non_strict_flags(self):
        c = ieee33()
        S = np.stack([c.load_pu, 40 * c.load_pu])
        res = solve_power_flow_batch(c, S, strict=False)
        np.testing.assert_array_equal(res.converged, [True, False])

    def test_backends_agree(self):
        c = ieee33()
        S = np.stack([c.load_pu * k for k in (0.3, 1.0, 1.2)])
        a = solve_power_flow_batch(c, S, backend="numpy")
        b = solve_power_flow_batch(c, S, backend="numba")
        np.testing.assert_allclose(a.V, b.V, atol=1e-14)


class TestProfiles:
    def test_empty_file(self, tmp_path):
        (tmp_path / "l.csv").write_text("")
        (tmp_path / "p.csv").write_text("time,18\n0,1\n")
        with pytest.raises(ProfileError):
            load_profiles(tmp_path / "l.csv", tmp_path / "p.csv")

    def test_missing_time(self, tmp_path):
        (tmp_path / "l.csv").write_text("t,2\n0,1\n")
        (tmp_path / "p.csv").write_text("time,18\n0,1\n")
        with pytest.raises(ProfileError):
            load_profiles(tmp_path / "l.csv", tmp_path / "p.csv")

    def test_negative_pv(self, tmp_path):
        (tmp_path / "l.csv").write_text("time,2\n0,1\n1,1\n")
        (tmp_path / "p.csv").write_text("time,18\n0,1\n1,-1\n")
        with pytest.raises(ProfileError):
            load_profiles(tmp_path / "l.csv", tmp_path / "p.csv")

    def test_length_mismatch(self, tmp_path):
        (tmp_path / "l.csv").write_text("time,2\n0,1\n1,1\n2,1\n")
        (tmp_path / "p.csv").write_text("time,18\n0,1\n1,1\n")
        with pytest.raises(ProfileError):
            load_profiles(tmp_path / "l.csv", tmp_path / "p.csv")

    def test_missing_agent_column(self, tmp_path):
        c = ieee33()
        prof = synthetic_profiles(c, 5, 0)
        write_profiles(prof, tmp_path / "l.csv", tmp_path / "p.csv")
        text = (tmp_path / "p.csv").read_text().splitlines()
        (tmp_path / "p.csv").write_text("\n".join(",".join(r.split(",")[:-1]) for r in text) + "\n")
        with pytest.raises(ProfileError):
            load_profiles(tmp_path / "l.csv", tmp_path / "p.csv", c)

    def test_constant_columns(self, tmp_path):
        (tmp_path / "l.csv").write_text("time,node_2\n0,5\n15,5\n30,5\n")
        (tmp_path / "p.csv").write_text("time,node_18\n0,7\n15,7\n30,7\n")
        prof = load_profiles(tmp_path / "l.csv", tmp_path / "p.csv", dt_minutes=5)
        assert len(prof) == 7
        np.testing.assert_array_equal(prof.load_kw, 5.0)
        np.testing.assert_array_equal(prof.pv_kw, 7.0)

    def test_round_trip(self, tmp_path):
        c = ieee33()
        prof = synthetic_profiles(c, 40, 3)
        write_profiles(prof, tmp_path / "l.csv", tmp_path / "p.csv")
        back = load_profiles(tmp_path / "l.csv", tmp_path / "p.csv", c)
        np.testing.assert_array_equal(back.pv_kw, prof.pv_kw)
        np.testing.assert_array_equal(back.load_kw, prof.load_kw)

    def test_synthetic_peak(self):
        c = ieee33()
        prof = synthetic_profiles(c, 901, 0, pv_peak_kw=800.0, clouds=False)
        pv = prof.pv_for(c)
        np.testing.assert_allclose(pv.max(axis=0), 800.0)
        np.testing.assert_allclose(prof.time_min[np.argmax(pv[:, 0])], 60.0 * (13.0 - 5.5))
        assert np.all(pv >= 0)

    def test_reactive_follows_power_factor(self):
        c = ieee33()
        prof = synthetic_profiles(c, 3, 0, load_noise=0.0)
        S = prof.nodal_load_pu(c)
        k = c.index_of(2)
        np.testing.assert_allclose(S[:, k].imag / S[:, k].real, 60.0 / 100.0)

    def test_validation(self):
        with pytest.raises(ProfileError):
            ProfileSet([0, 0], (2,), [[1], [1]], (18,), [[1], [1]])


class TestMetrics:
    def test_zero_curtailment(self):
        pbar = np.full((3, 2), 5.0)
        pc, _ = compute_metrics(np.broadcast_to(pbar, (4, 3, 2)), pbar, np.ones((4, 3, 2)))
        assert pc == 0.0

    def test_unit_voltage(self):
        _, vd = compute_metrics(np.zeros((2, 3, 1)), 0.0, np.ones((2, 3, 1)))
        assert vd == 0.0

    def test_arithmetic(self):
        pc, vd = compute_metrics([[[1.0, 3.0]]], [[2.0, 2.0]], [[[1.1, 0.9]]])
        assert pc == pytest.approx(1.0)
        assert vd == pytest.approx(0.01)


class TestOpfExperiment:
    def setup_method(self):
        self.case = ieee33()
        self.prof = synthetic_profiles(self.case, 60, 0, start_hour=11.0, end_hour=13.0)
        self.algo = AlgorithmConfig(0.05, 1e-3, "sofo", 60)

    def test_reproducible(self):
        phi = PhiDistribution("uniform", -1.0, 1.0)
        a = run_opf_experiment(self.case, self.prof, phi, self.algo, 3, RandomStream(1))
        b = run_opf_experiment(self.case, self.prof, phi, self.algo, 3, RandomStream(1))
        np.testing.assert_array_equal(a.runs["sofo"].y_hat, b.runs["sofo"].y_hat)
        assert a.runs["dofo"].VD == b.runs["dofo"].VD

    def test_full_compliance_variants_agree(self):
        r = run_opf_experiment(self.case, self.prof, None, self.algo, 2, RandomStream(2))
        np.testing.assert_array_equal(r.runs["sofo"].p_x_kw, r.runs["dofo"].p_x_kw)
        assert r.phi_label == "Deterministic"

    def test_inputs_respect_inverter_limits(self):
        r = run_opf_experiment(self.case, self.prof, PhiDistribution("beta", 0.0, 1.0, 4.0, 2.0), self.algo, 2,
                               RandomStream(3))
        for run in r.runs.values():
            assert run.rating_violations == 0
            # the input applied at step n was projected onto the step n-1 set
            assert np.all(run.p_x_kw[:, 1:] <= r.pbar_kw[:-1] + 1e-6)

    def test_zero_curtailment_baseline(self):
        v = zero_curtailment_voltages(self.case, self.prof)
        assert v.shape == (60, 6)
        assert v.max() > 1.05

    def test_report_rows_and_trace(self):
        r = run_opf_experiment(self.case, self.prof, PhiDistribution("uniform", 0.0, 1.0), self.algo, 2,
                               RandomStream(4))
        rows = list(r.rows())
        assert [row["algorithm"] for row in rows] == ["S-OFO", "D-OFO"]
        tr = r.trace(29)
        assert set(tr) == {"zero_curtailment", "sofo_mean", "sofo_rep0", "dofo_mean", "dofo_rep0"}

    def test_divergence_drops_replication(self, caplog):
        heavy = ProfileSet(self.prof.time_min, self.prof.load_nodes, self.prof.load_kw * 40, self.prof.pv_nodes,
                           self.prof.pv_kw)
        with caplog.at_level(logging.WARNING):
            r = run_opf_experiment(self.case, heavy, None, AlgorithmConfig(0.05, 1e-3, "sofo", 5), 2, RandomStream(0),
                                   variants=("sofo",))
        assert r.runs["sofo"].n_diverged == 2
        assert np.isnan(r.runs["sofo"].VD)
        assert "diverged" in caplog.text
        assert np.isnan(r.baseline_y).all()
