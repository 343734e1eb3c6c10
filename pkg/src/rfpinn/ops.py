"""Elementary functions generic over numpy arrays and jets.

Geometry fields and manufactured solutions are written once against these
helpers and can then be evaluated either on plain coordinate arrays (fast
value-only path) or on jets (derivative-carrying path).
"""

from __future__ import annotations

import numpy as np

from .jets import Jet


def sqrt(x):
    return x.sqrt() if isinstance(x, Jet) else np.sqrt(x)


def exp(x):
    return x.exp() if isinstance(x, Jet) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, Jet) else np.log(x)


def sin(x):
    return x.sin() if isinstance(x, Jet) else np.sin(x)


def cos(x):
    return x.cos() if isinstance(x, Jet) else np.cos(x)


def tanh(x):
    return x.tanh() if isinstance(x, Jet) else np.tanh(x)


def absolute(x):
    return x.abs() if isinstance(x, Jet) else np.abs(x)


def value_of(x):
    return x.value if isinstance(x, Jet) else np.asarray(x)
