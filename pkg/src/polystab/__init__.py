"""Noise-stabilised complex polynomial SDEs: simulation, Lyapunov certificates, exit moments."""

from .errors import *  # noqa: F401,F403
from .model import PolarPoint, SystemSpec  # noqa: F401

__version__ = "0.1.0"
