"""SPDM-style component authentication, secured device emulation, and
overhead benchmarks."""

from . import bench, crypto, devices, errors, session, transport, wire
from .requester import Requester, RequesterConfig
from .responder import Responder, ResponderConfig

__version__ = "0.1.0"

__all__ = [
    "Requester",
    "RequesterConfig",
    "Responder",
    "ResponderConfig",
    "bench",
    "crypto",
    "devices",
    "errors",
    "session",
    "transport",
    "wire",
    "__version__",
]
