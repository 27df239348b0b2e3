import math

import numpy as np
import pytest

from dtstab.registry import example_2_3, example_4_7
from dtstab.synth import (DelayChainController, ObservabilityChain,
                          ReconstructionMap, build_extended_system,
                          check_reconstruction, iterate_maps,
                          run_output_feedback, synthesize_delay_controller)
from dtstab.system import (ConstantDisturbance, ConstantInput,
                           RandomDisturbance, StateFeedback, SystemDef,
                           closed_loop, simulate)

B47 = example_4_7(0.5)


def integrator_chain_sys():
    return SystemDef(n=1, m=0, k=1, d_box=np.zeros((0, 2)), f=["x1 + u1"],
                     H=["x1"], name="summing")


class TestIterateMaps:
    def test_window_one_formula(self):
        chain = ObservabilityChain(B47.sys, 1)
        res = iterate_maps(chain, 3, [1.0, 2.0, 3.0], [[0.25]], [[-4.0]])
        want = np.array([2.0, 0.0, 0.25 * 3.0 + math.exp(3.0) * 2.0])
        assert np.array_equal(res.F_p, want)
        assert np.array_equal(res.y_hist[0], [1.0])   # y_0 = h(t, x) = x1
        assert np.array_equal(res.y_p, [2.0])         # y_1 = x1 one step on

    def test_matches_repeated_steps_exactly(self):
        sys = example_2_3().sys
        chain = ObservabilityChain(sys, 2)
        rng = np.random.default_rng(1)
        for _ in range(50):
            x0 = rng.uniform(-5, 5, size=2)
            d = rng.uniform(-2, 2, size=(2, 1))
            res = iterate_maps(chain, 4, x0, d, np.zeros((2, 0)))
            x = x0
            for i in range(2):
                x = sys.f_eval(4 + i, d[i], x)
            assert np.array_equal(res.F_p, x)

    def test_matches_simulation_rows(self):
        sys = example_2_3().sys
        chain = ObservabilityChain(sys, 2)
        traj = simulate(sys, 4, [0.3, -1.2], RandomDisturbance(seed=2),
                        horizon=2)
        res = iterate_maps(chain, 4, traj.x[0], traj.d[:2], np.zeros((2, 0)))
        assert np.array_equal(res.F[0], traj.x[1])
        assert np.array_equal(res.F_p, traj.x[2])

    def test_disturbance_window_validated(self):
        chain = ObservabilityChain(B47.sys, 1)
        with pytest.raises(ValueError, match="box"):
            iterate_maps(chain, 0, [0.0, 0.0, 0.0], [[0.9]], [[0.0]])


class TestCheckReconstruction:
    def test_square_feedback_exact(self):
        chain = ObservabilityChain(B47.sys, 1)
        rep = check_reconstruction(chain, B47.feedback, B47.psi,
                                   n_samples=2000, tol=0.0, seed=5)
        assert rep.verdict == "pass"
        assert rep.worst_margin == 0.0

    def test_output_function_always_reconstructible(self):
        # k(t, x) = theta(t, h(t, x)) reconstructs via the current output
        chain = ObservabilityChain(B47.sys, 1)
        k_fn = lambda t, x: np.array([t * x[0] + x[0] ** 3])
        psi = ReconstructionMap("t*y1 + y1^3", p=1)
        rep = check_reconstruction(chain, k_fn, psi, n_samples=500, tol=0.0)
        assert rep.verdict == "pass" and rep.worst_margin == 0.0

    def test_sign_flip_fails(self):
        chain = ObservabilityChain(B47.sys, 1)
        flipped = ReconstructionMap("(y1^2+u0)^2", p=1)
        rep = check_reconstruction(chain, B47.feedback, flipped,
                                   n_samples=50, tol=0.0)
        assert not rep.passed and rep.worst_margin > 0.0


class TestControllerStructure:
    def test_window_one_state_layout(self):
        ctrl = B47.controller
        assert ctrl.state_dim == 2  # one output slot plus one input slot
        w1 = ctrl.advance(np.zeros(2), [1.0], [-1.0])
        assert np.array_equal(w1, [1.0, -1.0])
        # the applied input reads the stored previous input, not the output
        u = ctrl.output(1, [2.0], w1)
        assert np.array_equal(u, [-(2.0 ** 2 + -1.0) ** 2])

    def test_window_two_shift_and_reversal(self):
        psi = ReconstructionMap(lambda t, yp, ys, us: np.zeros(1), p=2)
        ctrl = DelayChainController(p=2, p_y=1, k=1, psi=psi)
        assert ctrl.state_dim == 4
        w = np.array([10.0, 20.0, 30.0, 40.0])  # (w1, w2 | w3, w4)
        w2 = ctrl.advance(w, [1.0], [2.0])
        assert np.array_equal(w2, [1.0, 10.0, 2.0, 30.0])
        y_hist, u_hist = ctrl.window(w)
        assert [v[0] for v in y_hist] == [20.0, 10.0]  # oldest first
        assert [v[0] for v in u_hist] == [40.0, 30.0]

    def test_custom_retraction_applied_to_output_slots(self):
        psi = ReconstructionMap(lambda t, yp, ys, us: np.zeros(1), p=1)
        ctrl = DelayChainController(p=1, p_y=1, k=1, psi=psi,
                                    retraction=lambda y: 2.0 * y)
        y_hist, u_hist = ctrl.window(np.array([3.0, 7.0]))
        assert y_hist[0][0] == 6.0
        assert u_hist[0][0] == 7.0

    def test_json_description(self):
        js = B47.controller.to_json()
        assert js == {"p": 1, "psi": "-(y1^2+u0)^2", "retraction": "identity",
                      "w0": [0.0, 0.0]}


class TestRunOutputFeedback:
    def test_hand_trace(self):
        traj, rep = run_output_feedback(B47.sys, B47.controller, 0,
                                        [1.0, 2.0, 3.0], w0=np.zeros(2),
                                        dpol=ConstantDisturbance([0.5]),
                                        horizon=6, reference_k=B47.feedback)
        assert traj.u[0, 0] == -1.0
        assert np.array_equal(traj.x[1], [2.0, 3.0, 3.5])
        assert traj.u[1, 0] == -9.0                       # = -x2(1)^2
        assert rep.from_t == 1 and rep.history_exact
        assert rep.coincidence_max_err == 0.0
        assert rep.passed

    def test_zero_start_stays_zero(self):
        traj, rep = run_output_feedback(B47.sys, B47.controller, 0,
                                        np.zeros(3), w0=np.zeros(2),
                                        dpol=ConstantDisturbance([0.5]),
                                        horizon=10, reference_k=B47.feedback)
        assert np.all(traj.x == 0.0) and np.all(traj.u == 0.0)
        assert rep.passed

    def test_arbitrary_register_seed_coincides_after_p(self):
        lam = B47.cand.lam
        rng = np.random.default_rng(0)
        for _ in range(20):
            x0 = rng.uniform(-4, 4, size=3)
            w0 = rng.uniform(-4, 4, size=2)
            traj, rep = run_output_feedback(
                B47.sys, B47.controller, 0, x0, w0=w0,
                dpol=RandomDisturbance(seed=int(rng.integers(1e6))),
                horizon=40, reference_k=B47.feedback, tol=1e-12)
            assert rep.history_exact
            assert rep.passed, rep.to_json()
            for i in range(1, len(traj)):
                assert abs(traj.u[i, 0] + traj.x[i, 1] ** 2) \
                    <= 1e-12 * (1.0 + traj.x[i, 1] ** 2)
            # once the registers coincide, the certificate decay kicks in
            V = [B47.cand.V_eval(t, traj.x[i]) for i, t in enumerate(traj.t)]
            for i in range(1, len(traj) - 1):
                assert V[i + 1] <= lam * V[i] * (1.0 + 1e-12) + 1e-300

    def test_wrong_retraction_flags_mismatch(self):
        # target -x^2 on the summing plant; the window-two reconstruction
        # reads the oldest output, so a scaled retraction corrupts it
        sys = integrator_chain_sys()
        k_fn = StateFeedback(["-x1^2"], n=1)
        psi = ReconstructionMap("-(y0 + u0 + u1)^2", p=2)
        chain = ObservabilityChain(sys, 2)
        assert check_reconstruction(chain, k_fn, psi, n_samples=200,
                                    tol=0.0).passed
        good = synthesize_delay_controller(psi, p_y=1, k=1)
        bad = synthesize_delay_controller(psi, p_y=1, k=1,
                                          retraction=lambda y: 2.0 * y)
        _, rep_good = run_output_feedback(sys, good, 0, [1.5], horizon=12,
                                          reference_k=k_fn)
        _, rep_bad = run_output_feedback(sys, bad, 0, [1.5], horizon=9,
                                         reference_k=k_fn)
        assert rep_good.passed
        assert not rep_bad.passed
        assert rep_bad.coincidence_max_err > 1.0


class TestExtendedSystem:
    def test_dimensions_and_output_stacking(self):
        ext = build_extended_system(B47.sys, 1)
        assert (ext.n, ext.m, ext.k) == (4, 1, 2)
        assert ext.p_Y == 3 and ext.p_y == 2
        s = [1.0, 2.0, 3.0, 9.0]
        assert np.array_equal(ext.h_eval(0, s), [1.0, 9.0])
        assert np.array_equal(ext.H_eval(0, s), [1.0, 2.0, 3.0])

    def test_constant_register_under_identity_input(self):
        ext = build_extended_system(B47.sys, 1)
        hold = StateFeedback(lambda t, s: np.array([0.0, s[3]]), n=4)
        traj = simulate(ext, 0, [0.5, -0.5, 1.0, 9.0],
                        ConstantDisturbance([0.2]), hold, horizon=8)
        assert np.all(traj.x[:, 3] == 9.0)

    def test_projection_matches_original(self):
        ext = build_extended_system(B47.sys, 1)
        orig = simulate(B47.sys, 0, [1.0, -0.5, 0.5],
                        RandomDisturbance(seed=7), ConstantInput([0.3]),
                        horizon=12)
        lifted = simulate(ext, 0, [1.0, -0.5, 0.5, 4.0],
                          RandomDisturbance(seed=7),
                          ConstantInput([0.3, 0.1]), horizon=12)
        assert np.array_equal(lifted.x[:, :3], orig.x)


class TestSeparationComposition:
    def test_delay_controller_as_static_feedback_on_extended_plant(self):
        # append the register block as integrator states, then drive (u, v)
        # by a static function of the extended measured output (y, w); the
        # interconnection reproduces the dynamic-feedback run row for row
        ctrl = B47.controller
        ext = build_extended_system(B47.sys, ctrl.state_dim)

        def static_fb(t, s):
            y = s[0:1]            # measured output of the plant is x1
            w = s[3:5]
            u = ctrl.output(t, y, w)
            v = ctrl.advance(w, y, u)
            return np.concatenate([u, v])

        x0 = np.array([1.0, 2.0, 3.0])
        w0 = np.array([0.5, -0.25])
        lifted = simulate(closed_loop(ext, StateFeedback(static_fb, n=5)),
                          0, np.concatenate([x0, w0]),
                          RandomDisturbance(seed=13), horizon=25)
        direct, rep = run_output_feedback(B47.sys, ctrl, 0, x0, w0=w0,
                                          dpol=RandomDisturbance(seed=13),
                                          horizon=25,
                                          reference_k=B47.feedback)
        assert rep.passed
        assert np.array_equal(lifted.x[:, :3], direct.x)
        assert np.array_equal(lifted.x[:, 3:], direct.w)
