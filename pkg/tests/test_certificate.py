import json

import numpy as np
import pytest

from corwa.certificate import (
    CertificateMargins,
    CoRwaCertificate,
    CouplingParams,
    cbf_residual,
    check_hurwitz,
    check_metzler,
    clf_residual,
    comparison_step,
    load_certificate,
    save_certificate,
    scalar_lyapunov,
    solve_positive_p,
)
from corwa.dynamics import scalar_test_model
from corwa.network import FeedForwardNet, Layer, SquaredNet
from corwa.topology import JointState, SystemTopology


def random_metzler(rng, q, hurwitz=True):
    m = rng.uniform(0.0, 1.0, size=(q, q))
    if hurwitz:
        # strict diagonal dominance forces eigenvalues into the left plane
        np.fill_diagonal(m, 0.0)
        diag = -(m.sum(axis=1) + rng.uniform(0.2, 2.0, size=q))
        m[np.diag_indices(q)] = diag
    else:
        m[np.diag_indices(q)] = rng.uniform(-1.0, 1.0, size=q)
    return m


def scalar_identity_certificate(lam=-2.0, ups=-1.0):
    """Single agent, V(x) = x^2, h(x) = x, pi = 0."""
    inner = FeedForwardNet([Layer(np.array([[1.0]]), np.zeros(1), "identity")])
    v = SquaredNet(inner, delta=0.0)
    h = FeedForwardNet([Layer(np.array([[1.0]]), np.zeros(1), "identity")])
    pi = FeedForwardNet([Layer(np.zeros((1, 1)), np.zeros(1), "identity")])
    return CoRwaCertificate([v], [h], [pi], np.array([[lam]]), np.array([[ups]]))


def single_topo():
    return SystemTopology(1, [1], [1.0], [set()], [0])


class TestMetzler:
    def test_diag_negative(self):
        assert check_metzler(np.array([[-1.0, 0.0], [0.0, -1.0]]))

    def test_negative_offdiag_rejected(self):
        assert not check_metzler(np.array([[0.0, -0.1], [0.0, 0.0]]))

    def test_positive_offdiag(self):
        assert check_metzler(np.array([[-2.0, 1.0], [1.0, -2.0]]))

    def test_non_square(self):
        with pytest.raises(ValueError):
            check_metzler(np.zeros((2, 3)))


class TestHurwitz:
    def test_stable_diag(self):
        assert check_hurwitz(np.diag([-1.0, -1.0]))

    def test_zero_matrix(self):
        assert not check_hurwitz(np.zeros((2, 2)))

    def test_symmetric_coupled(self):
        # eigenvalues -1 and -3
        assert check_hurwitz(np.array([[-2.0, 1.0], [1.0, -2.0]]))

    def test_agrees_with_minor_criterion_on_random_metzler(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            q = int(rng.integers(1, 7))
            m = random_metzler(rng, q, hurwitz=bool(rng.random() < 0.7))
            # raises on disagreement between the two tests
            check_hurwitz(m)


class TestSolvePositiveP:
    def test_symmetric_example(self):
        p, c, cmin = solve_positive_p(np.array([[-2.0, 1.0], [1.0, -2.0]]))
        assert p == pytest.approx([1.0, 1.0])
        assert c == pytest.approx([1.0, 1.0])
        assert cmin == pytest.approx(1.0)

    def test_diagonal_example(self):
        p, c, cmin = solve_positive_p(np.diag([-3.0, -1.0]))
        assert p == pytest.approx([1.0 / 3.0, 1.0])
        assert c == pytest.approx([1.0, 1.0])
        assert cmin == pytest.approx(1.0)

    def test_scalar(self):
        p, c, cmin = solve_positive_p(np.array([[-1.0]]))
        assert p == pytest.approx([1.0])
        assert cmin == pytest.approx(1.0)

    def test_rejects_non_hurwitz(self):
        with pytest.raises(ValueError):
            solve_positive_p(np.zeros((2, 2)))

    def test_random_instances_strictly_positive(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            q = int(rng.integers(1, 8))
            lam = random_metzler(rng, q, hurwitz=True)
            p, c, cmin = solve_positive_p(lam)
            assert np.all(p > 0) and np.all(c > 0) and cmin > 0
            assert lam.T @ p == pytest.approx(-c)

    def test_reducible_fallback(self):
        # upper-triangular Metzler Hurwitz: the plain solve may already
        # work, but the Perron fallback must also handle it
        lam = np.array([[-1.0, 1.0], [0.0, -2.0]])
        p, c, cmin = solve_positive_p(lam)
        assert np.all(p > 0) and np.all(c > 0)


class TestComparison:
    def test_zero_matrix_fixed_point(self):
        z = comparison_step(np.zeros((2, 2)), np.array([1.0, 2.0]), 0.1)
        assert z == pytest.approx([1.0, 2.0])

    def test_coupled_step(self):
        m = np.array([[-1.0, 1.0], [1.0, -1.0]])
        z = comparison_step(m, np.array([1.0, 0.0]), 0.1)
        assert z == pytest.approx([0.9, 0.1])

    def test_scalar_decay(self):
        z = comparison_step(np.array([[-1.0]]), np.array([1.0]), 0.05)
        assert z == pytest.approx([0.95])

    def test_positivity_preservation(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            q = int(rng.integers(1, 9))
            m = random_metzler(rng, q, hurwitz=bool(rng.random() < 0.5))
            dt = 1.0 / max(np.abs(np.diag(m)).max(), 1e-6)
            z = rng.uniform(0.0, 3.0, size=q)
            for _ in range(50):
                z = comparison_step(m, z, dt)
                assert np.all(z >= -1e-12)

    def test_comparison_decay(self):
        rng = np.random.default_rng(3)
        dt = 1e-3
        for _ in range(200):
            q = int(rng.integers(1, 9))
            lam = random_metzler(rng, q, hurwitz=True)
            p, c, cmin = solve_positive_p(lam)
            v = rng.uniform(0.0, 2.0, size=q)
            vnext = (np.eye(q) + dt * lam) @ v
            vnext -= rng.uniform(0.0, 0.01, size=q) * vnext  # any smaller value
            vnext = np.maximum(vnext, 0.0)
            assert p @ vnext <= (1.0 - dt * cmin) * (p @ v) + 1e-12

    def test_principal_submatrix_closure(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            q = int(rng.integers(2, 9))
            lam = random_metzler(rng, q, hurwitz=True)
            k = int(rng.integers(1, q))
            idx = np.sort(rng.choice(q, size=k, replace=False))
            sub = lam[np.ix_(idx, idx)]
            assert check_metzler(sub)
            assert np.max(np.linalg.eigvals(sub).real) < 0
            assert check_hurwitz(sub)


class TestResiduals:
    def test_clf_residual_balance(self):
        # V = x^2 on x_dot = -x gives grad V . f = -2 x^2, so the
        # coupling slot balances it exactly at lambda = -2
        cert = scalar_identity_certificate(lam=-2.0)
        model = scalar_test_model(rate=-1.0)
        topo = single_topo()
        for x in (-0.7, 0.3, 1.0):
            joint = JointState(np.array([[x]]))
            assert clf_residual(cert, model, joint, topo, 0) == pytest.approx(0.0, abs=1e-12)

    def test_clf_residual_slack(self):
        cert = scalar_identity_certificate(lam=-1.0)
        model = scalar_test_model(rate=-1.0)
        topo = single_topo()
        for x in (-0.7, 0.3, 1.0):
            joint = JointState(np.array([[x]]))
            assert clf_residual(cert, model, joint, topo, 0) == pytest.approx(-x * x)

    def test_clf_residual_zero_at_equilibrium(self):
        cert = scalar_identity_certificate(lam=-1.0)
        model = scalar_test_model(rate=-1.0)
        joint = JointState(np.zeros((1, 1)))
        assert clf_residual(cert, model, joint, single_topo(), 0) == pytest.approx(0.0)

    def test_cbf_residual_balance(self):
        # h = x on x_dot = -x: lie = -x, coupling mu*h = -x at mu = -1
        cert = scalar_identity_certificate(ups=-1.0)
        model = scalar_test_model(rate=-1.0)
        topo = single_topo()
        for x in (0.2, 0.9):
            joint = JointState(np.array([[x]]))
            assert cbf_residual(cert, model, joint, topo, 0) == pytest.approx(0.0, abs=1e-12)

    def test_cbf_residual_sign(self):
        cert = scalar_identity_certificate(ups=-2.0)
        model = scalar_test_model(rate=-1.0)
        topo = single_topo()
        for x in (0.2, 0.9):
            joint = JointState(np.array([[x]]))
            # residual = -x - (-2x) = x >= 0 on x >= 0
            assert cbf_residual(cert, model, joint, topo, 0) == pytest.approx(x)

    def test_discrete_matches_continuous_for_small_step(self):
        cert = scalar_identity_certificate(lam=-2.0)
        model = scalar_test_model(rate=-1.0)
        topo = single_topo()
        joint = JointState(np.array([[0.8]]))
        cont = clf_residual(cert, model, joint, topo, 0)
        disc = clf_residual(cert, model, joint, topo, 0, lie_dt=1e-6)
        assert disc == pytest.approx(cont, abs=1e-5)

    def test_scalar_lyapunov(self):
        cert = scalar_identity_certificate()
        joint = JointState(np.array([[2.0]]))
        assert scalar_lyapunov(cert, np.array([1.0]), joint) == pytest.approx(4.0)
        assert scalar_lyapunov(cert, np.array([3.0]), joint) == pytest.approx(12.0)
        joint0 = JointState(np.zeros((1, 1)))
        assert scalar_lyapunov(cert, np.array([1.0]), joint0) == 0.0

    def test_v_positive_definite_by_construction(self):
        rng = np.random.default_rng(5)
        from corwa.network import mlp
        v = SquaredNet(mlp([2, 6, 2], ["softplus", "identity"], rng=rng), delta=1e-3)
        assert v.forward(np.zeros(2)) == 0.0
        for p in rng.normal(size=(100, 2)):
            if np.linalg.norm(p) > 1e-9:
                assert v.forward(p) > 0.0


class TestCouplingParams:
    def test_realize_structure(self):
        cp = CouplingParams.init(3, lam_scale=0.2, ups_scale=0.3)
        lam, ups = cp.realize()
        assert check_metzler(lam) and check_metzler(ups)
        assert check_hurwitz(lam)
        assert np.all(np.diag(lam) < 0)

    def test_project_restores_hurwitz(self):
        cp = CouplingParams.init(3, lam_scale=0.2)
        cp.lam_off[:] = 3.0            # large off-diagonals break Hurwitz
        lam, _ = cp.realize()
        assert not check_hurwitz(lam)
        cp.project_hurwitz()
        lam, _ = cp.realize()
        assert check_hurwitz(lam)


class TestSerialization:
    def test_bundle_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        from corwa.network import mlp, append_output_clamp
        v = SquaredNet(mlp([2, 4, 2], ["softplus", "identity"], rng=rng))
        h = mlp([4, 5, 1], ["tanh", "identity"], rng=rng)
        pi = append_output_clamp(mlp([4, 3, 1], ["relu", "identity"], rng=rng),
                                 np.array([-1.0]), np.array([1.0]))
        lam = np.array([[-0.5, 0.1], [0.2, -0.7]])
        ups = np.array([[-0.1, 0.0], [0.3, -0.2]])
        cert = CoRwaCertificate([v, v], [h, h], [pi, pi], lam, ups,
                                CertificateMargins(eps0=0.07))
        path = tmp_path / "cert.json"
        save_certificate(cert, path)
        back = load_certificate(path)
        assert np.array_equal(back.lam, cert.lam)
        assert np.array_equal(back.ups, cert.ups)
        assert back.margins.eps0 == cert.margins.eps0
        for a, b in zip(cert.h_nets, back.h_nets):
            for la, lb in zip(a.layers, b.layers):
                assert np.array_equal(la.w, lb.w)
                assert np.array_equal(la.b, lb.b)
        x = rng.normal(size=2)
        assert back.v_nets[0].forward(x) == cert.v_nets[0].forward(x)

    def test_format_guard(self, tmp_path):
        cert = scalar_identity_certificate()
        bundle = cert.to_bundle()
        bundle["format"] = 99
        with pytest.raises(ValueError):
            CoRwaCertificate.from_bundle(bundle)
