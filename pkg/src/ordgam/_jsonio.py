"""JSON writing with pinned float formatting (17 significant digits)."""
import json
import math
import re

import numpy as np

_TOKEN = "\x00F:"
_TOKEN_RE = re.compile('"\\\\u0000F:([^"]*)"')


def _prepare(obj):
    if isinstance(obj, dict):
        return {str(k): _prepare(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_prepare(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _prepare(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return _TOKEN + format(x, ".17g")
    return obj


def dumps(obj, indent=2):
    text = json.dumps(_prepare(obj), indent=indent, sort_keys=False)
    return _TOKEN_RE.sub(lambda m: m.group(1), text)


def dump(obj, path, indent=2):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj, indent=indent))
        fh.write("\n")
