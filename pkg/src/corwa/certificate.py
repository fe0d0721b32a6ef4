"""Cooperative reach-while-avoid certificate structure and the
Metzler/Hurwitz positive-systems algebra it rests on.

A certificate bundles one Lyapunov component V_i per agent, one barrier
h_i per agent over the padded extended state, decentralized controllers
pi_i, and two coupling matrices: Lambda (Metzler and Hurwitz, columns
lambda_i) bounding Lyapunov decrements and Upsilon (Metzler, columns
mu_i) bounding barrier increments. Coupling terms are localized through
the state-dependent interaction mask.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .network import FeedForwardNet, SquaredNet, net_from_config, _sigmoid
from .topology import (
    JointState,
    SystemTopology,
    extended_state,
    interaction_mask,
)

METZLER_TOL = 1e-12
HURWITZ_TOL = 1e-9

FORMAT_VERSION = 1


@dataclass
class CertificateMargins:
    eps0: float = 0.05          # strict barrier margin on safe states
    eps1: float = 0.01          # Lyapunov decrement slack
    eps2: float = 0.01          # Lyapunov positivity slack
    eps3: float = 0.01          # barrier increment slack
    eps4: float = 0.01          # barrier negativity slack (unsafe)
    eps5: float = 0.01          # barrier positivity slack (safe)
    sigma1: float = 1.0
    sigma2: float = 1.0
    sigma3: float = 1.0

    def __post_init__(self):
        if self.eps0 <= 0 or min(self.eps1, self.eps2, self.eps3, self.eps4, self.eps5) <= 0:
            raise ValueError("slack margins must be positive")
        if min(self.sigma1, self.sigma2, self.sigma3) <= 0:
            raise ValueError("loss weights must be positive")

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "eps0", "eps1", "eps2", "eps3", "eps4", "eps5",
            "sigma1", "sigma2", "sigma3")}


@dataclass
class ComparisonState:
    z: np.ndarray
    time: float = 0.0


@dataclass
class CoRwaCertificate:
    v_nets: list          # V_i : R^n -> R>=0 (SquaredNet by default)
    h_nets: list[FeedForwardNet]          # h_i : R^{M_i n} -> R
    controller_nets: list[FeedForwardNet]  # pi_i : R^{M_i n} -> R^m
    lam: np.ndarray                        # Lambda, columns lambda_i
    ups: np.ndarray                        # Upsilon, columns mu_i
    margins: CertificateMargins = field(default_factory=CertificateMargins)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.ups = np.asarray(self.ups, dtype=float)
        q = len(self.v_nets)
        if not (len(self.h_nets) == len(self.controller_nets) == q):
            raise ValueError("per-agent net lists must have equal length")
        if self.lam.shape != (q, q) or self.ups.shape != (q, q):
            raise ValueError("coupling matrices must be q x q")

    @property
    def q(self):
        return len(self.v_nets)

    # ---- pointwise evaluation ----------------------------------------

    def v_value(self, i, x_i):
        return float(np.asarray(self.v_nets[i].forward(x_i)).reshape(()))

    def v_vector(self, joint: JointState):
        return np.array([self.v_value(i, joint.x[i]) for i in range(self.q)])

    def h_value(self, i, ext_flat):
        return float(np.asarray(self.h_nets[i].forward(ext_flat)).reshape(()))

    def h_vector(self, joint: JointState, topo: SystemTopology):
        return np.array([
            self.h_value(i, extended_state(joint, topo, i).flat)
            for i in range(self.q)
        ])

    def control(self, i, ext_flat):
        return np.asarray(self.controller_nets[i].forward(ext_flat), dtype=float)

    # ---- serialization -------------------------------------------------

    def to_bundle(self):
        return {
            "format": FORMAT_VERSION,
            "v_nets": [n.to_config() for n in self.v_nets],
            "h_nets": [n.to_config() for n in self.h_nets],
            "controller_nets": [n.to_config() for n in self.controller_nets],
            "lam": self.lam.tolist(),
            "ups": self.ups.tolist(),
            "margins": self.margins.to_dict(),
        }

    @staticmethod
    def from_bundle(bundle):
        if bundle.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported certificate format {bundle.get('format')!r}")
        return CoRwaCertificate(
            v_nets=[net_from_config(c) for c in bundle["v_nets"]],
            h_nets=[net_from_config(c) for c in bundle["h_nets"]],
            controller_nets=[net_from_config(c) for c in bundle["controller_nets"]],
            lam=np.array(bundle["lam"], dtype=float),
            ups=np.array(bundle["ups"], dtype=float),
            margins=CertificateMargins(**bundle["margins"]),
        )


def save_certificate(cert: CoRwaCertificate, path):
    """Atomic JSON write; floats round-trip bit-exactly via repr."""
    payload = json.dumps(cert.to_bundle())
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_certificate(path) -> CoRwaCertificate:
    with open(path) as f:
        return CoRwaCertificate.from_bundle(json.load(f))


# ---- Metzler / Hurwitz algebra ------------------------------------------


def check_metzler(m, tol=METZLER_TOL) -> bool:
    """True iff all off-diagonal entries are >= -tol."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    off = m - np.diag(np.diag(m))
    return bool(np.all(off >= -tol))


def check_hurwitz(m, tol=HURWITZ_TOL) -> bool:
    """True iff all eigenvalue real parts are < -tol.

    For Metzler matrices the M-matrix criterion (all leading principal
    minors of -m positive) is evaluated as well and must agree with the
    eigenvalue test; disagreement indicates a numerically degenerate
    instance and raises.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    eig = np.linalg.eigvals(m)
    by_eig = bool(np.max(eig.real) < -tol)
    if check_metzler(m):
        by_minor = _mmatrix_minors_positive(-m)
        near_boundary = abs(np.max(eig.real)) <= 10.0 * tol
        if by_minor != by_eig and not near_boundary:
            raise ArithmeticError(
                "Hurwitz diagnostics disagree between eigenvalue and minor tests"
            )
    return by_eig


def _mmatrix_minors_positive(a):
    a = np.asarray(a, dtype=float)
    for k in range(1, a.shape[0] + 1):
        if np.linalg.det(a[:k, :k]) <= 0.0:
            return False
    return True


def solve_positive_p(lam):
    """Strictly positive p with p^T Lambda = -c^T, c > 0, and the decay
    rate c_min = min_i c_i / p_i.

    First tries the linear solve Lambda^T p = -1. If that p is not
    strictly positive, falls back to the left Perron eigenvector of
    Lambda (off-diagonals perturbed by 1e-9 if the matrix is reducible,
    so the eigenvector is strictly positive).
    """
    lam = np.asarray(lam, dtype=float)
    if not check_metzler(lam):
        raise ValueError("matrix is not Metzler")
    if not check_hurwitz(lam):
        raise ValueError("matrix is not Hurwitz")
    q = lam.shape[0]
    p = None
    try:
        cand = np.linalg.solve(lam.T, -np.ones(q))
        if np.all(cand > 1e-12):
            p = cand
    except np.linalg.LinAlgError:
        p = None
    if p is None:
        p = _left_perron_vector(lam)
    c = -lam.T @ p
    if np.any(c <= 0.0) or np.any(p <= 0.0):
        raise ArithmeticError("positive comparison vector construction failed")
    c_min = float(np.min(c / p))
    return p, c, c_min


def _left_perron_vector(lam):
    q = lam.shape[0]
    for bump in (0.0, 1e-9):
        m = lam + bump * (np.ones((q, q)) - np.eye(q))
        vals, vecs = np.linalg.eig(m.T)
        k = int(np.argmax(vals.real))
        v = vecs[:, k].real
        if v.sum() < 0:
            v = -v
        if np.all(v > 1e-12):
            return v / v.sum()
    raise ArithmeticError("Perron vector not strictly positive even after perturbation")


def comparison_step(m, z, dt):
    """One Euler step of the comparison system z_dot = M z."""
    m = np.asarray(m, dtype=float)
    z = np.asarray(z, dtype=float)
    if dt <= 0:
        raise ValueError("step size must be positive")
    return z + dt * (m @ z)


def scalar_lyapunov(cert: CoRwaCertificate, p, joint: JointState):
    """Comparison Lyapunov value V_p = sum_i p_i V_i(x_i)."""
    return float(np.dot(np.asarray(p, dtype=float), cert.v_vector(joint)))


# ---- certificate residuals ----------------------------------------------


def closed_loop_derivative(cert: CoRwaCertificate, model, joint: JointState,
                           topo: SystemTopology, i: int):
    """f_i + g_i pi_i(xbar_i) at the current joint state."""
    ext = extended_state(joint, topo, i)
    u = cert.control(i, ext.flat)
    return model.drift(joint, topo, i) + model.input_matrix(joint, topo, i) @ u


def closed_loop_derivatives(cert: CoRwaCertificate, model, joint: JointState,
                            topo: SystemTopology):
    return np.stack([
        closed_loop_derivative(cert, model, joint, topo, i) for i in range(topo.q)
    ])


def clf_residual(cert: CoRwaCertificate, model, joint: JointState,
                 topo: SystemTopology, i: int, lie_dt: float | None = None):
    """Lyapunov condition residual; <= 0 means the condition holds here.

    Continuous form: grad V_i . (f_i + g_i pi_i) - (lambda_i o A_i)^T V.
    With `lie_dt` the Lie derivative is replaced by the one-step forward
    difference (V_i(x_i + dt F_i) - V_i(x_i)) / dt.
    """
    xi = joint.x[i]
    fi = closed_loop_derivative(cert, model, joint, topo, i)
    if lie_dt is None:
        lie = float(cert.v_nets[i].input_gradient(xi)[0] @ fi)
    else:
        lie = (cert.v_value(i, xi + lie_dt * fi) - cert.v_value(i, xi)) / lie_dt
    mask = interaction_mask(joint, topo, i).mask
    coupling = float((cert.lam[:, i] * mask) @ cert.v_vector(joint))
    return lie - coupling


def cbf_residual(cert: CoRwaCertificate, model, joint: JointState,
                 topo: SystemTopology, i: int, lie_dt: float | None = None):
    """Barrier condition residual; >= 0 means the condition holds here.

    The extended-state derivative stacks the closed-loop derivatives of
    the agent and its current neighbors; padding rows have zero
    derivative. The mask is frozen across the discrete step.
    """
    ext = extended_state(joint, topo, i)
    ids = [i] + interaction_mask(joint, topo, i).neighbor_ids
    deriv = np.zeros_like(ext.rows)
    for k, j in enumerate(ids):
        deriv[k] = closed_loop_derivative(cert, model, joint, topo, j)
    if lie_dt is None:
        lie = float(cert.h_nets[i].input_gradient(ext.flat)[0] @ deriv.reshape(-1))
    else:
        nxt = ext.rows + lie_dt * deriv
        lie = (cert.h_value(i, nxt.reshape(-1)) - cert.h_value(i, ext.flat)) / lie_dt
    mask = interaction_mask(joint, topo, i).mask
    coupling = float((cert.ups[:, i] * mask) @ cert.h_vector(joint, topo))
    return lie - coupling


# ---- trainable coupling parameterization ---------------------------------


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass
class CouplingParams:
    """Unconstrained parameterization of Lambda and Upsilon.

    Lambda = -diag(softplus(lam_diag)) + offdiag(softplus(lam_off)),
    which is Metzler by construction; Hurwitz is re-checked after every
    epoch with diagonal inflation on violation. Upsilon keeps a free
    diagonal and softplus off-diagonals, hence always Metzler.
    """

    lam_diag: np.ndarray        # (q,)
    lam_off: np.ndarray         # (q, q), diagonal ignored
    ups_diag: np.ndarray        # (q,)
    ups_off: np.ndarray         # (q, q), diagonal ignored

    @staticmethod
    def init(q, lam_scale=0.2, ups_scale=0.2):
        inv = _softplus_inverse(lam_scale)
        return CouplingParams(
            lam_diag=np.full(q, inv),
            lam_off=np.full((q, q), _softplus_inverse(1e-3)),
            ups_diag=np.full(q, -ups_scale),
            ups_off=np.full((q, q), _softplus_inverse(1e-3)),
        )

    def realize(self):
        q = self.lam_diag.shape[0]
        off = ~np.eye(q, dtype=bool)
        lam = np.zeros((q, q))
        lam[off] = _softplus(self.lam_off)[off]
        lam -= np.diag(_softplus(self.lam_diag))
        ups = np.zeros((q, q))
        ups[off] = _softplus(self.ups_off)[off]
        ups += np.diag(self.ups_diag)
        return lam, ups

    def apply_gradients(self, d_lam, d_ups, lr):
        """Gradient step on the raw parameters given dL/dLambda, dL/dUpsilon."""
        q = self.lam_diag.shape[0]
        off = ~np.eye(q, dtype=bool)
        self.lam_diag -= lr * (-np.diag(d_lam)) * _sigmoid(self.lam_diag)
        self.lam_off[off] -= lr * (d_lam * _sigmoid(self.lam_off))[off]
        self.ups_diag -= lr * np.diag(d_ups)
        self.ups_off[off] -= lr * (d_ups * _sigmoid(self.ups_off))[off]

    def project_hurwitz(self, max_rounds=60):
        """Inflate the Lambda diagonal until the realized matrix is Hurwitz."""
        for _ in range(max_rounds):
            lam, _ = self.realize()
            if check_hurwitz(lam):
                return
            row_gap = np.abs(lam).sum(axis=1) - 2.0 * np.abs(np.diag(lam))
            need = _softplus(self.lam_diag) + np.maximum(row_gap, 0.1)
            self.lam_diag = _softplus_inverse_vec(need)
        raise ArithmeticError("could not restore the Hurwitz property")


def _softplus_inverse(y):
    y = float(y)
    if y <= 0:
        raise ValueError("softplus inverse needs y > 0")
    return y + np.log(-np.expm1(-y)) if y > 1e-8 else np.log(np.expm1(y))


def _softplus_inverse_vec(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))
