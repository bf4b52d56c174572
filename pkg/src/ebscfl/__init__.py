"""Secure robust aggregation for clustered federated learning, simulated in-process."""

from . import kdc, moma, protocol, rfca, skt, srfc, vomca, wire

__all__ = ["kdc", "moma", "protocol", "rfca", "skt", "srfc", "vomca", "wire"]
__version__ = "0.1.0"
