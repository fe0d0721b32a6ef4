"""Cooperative reach-while-avoid certificates for interconnected
systems: neural vector Lyapunov/barrier synthesis, interval
branch-and-bound verification with discretization-error margins, and
structural certificate transfer."""

from .certificate import (
    CertificateMargins,
    CoRwaCertificate,
    check_hurwitz,
    check_metzler,
    load_certificate,
    save_certificate,
    solve_positive_p,
)
from .network import FeedForwardNet, Interval, SquaredNet
from .topology import JointState, SystemTopology

__all__ = [
    "CertificateMargins",
    "CoRwaCertificate",
    "FeedForwardNet",
    "Interval",
    "JointState",
    "SquaredNet",
    "SystemTopology",
    "check_hurwitz",
    "check_metzler",
    "load_certificate",
    "save_certificate",
    "solve_positive_p",
]
