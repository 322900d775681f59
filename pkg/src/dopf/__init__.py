"""Distributed optimal power flow by area decomposition and alternating algorithms."""
from dopf.network import NetworkCase, load_case, parse_matpower, validate_case

__version__ = "0.1.0"
