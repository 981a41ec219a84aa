"""Fixed-width numeric encoding for shared state.

All numbers that cross a site boundary are encoded as fixed-width
strings: floats with 17 significant digits (lossless for float64) and a
mandatory sign, integers zero-padded. Constant width makes the
serialized message size independent of the values inside it, so byte
size cannot leak anything about a site's data.
"""

import math

from .errors import ProtocolError

INT_WIDTH = 12


def fmt_float(x):
    return f"{float(x):+.17e}"


def parse_float(s, path=""):
    try:
        v = float(s)
    except (TypeError, ValueError):
        raise ProtocolError(f"{path}: not a decimal float: {s!r}", field_path=path)
    if not math.isfinite(v):
        raise ProtocolError(f"{path}: non-finite value {s!r}", field_path=path)
    return v


def fmt_int(n):
    return f"{int(n):0{INT_WIDTH}d}"


def parse_int(s, path=""):
    try:
        return int(s)
    except (TypeError, ValueError):
        raise ProtocolError(f"{path}: not an integer: {s!r}", field_path=path)


def fmt_floats(values):
    return [fmt_float(v) for v in values]


def parse_floats(values, path=""):
    if not isinstance(values, list):
        raise ProtocolError(f"{path}: expected a list", field_path=path)
    return [parse_float(v, path=path) for v in values]
