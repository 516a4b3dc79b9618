# rfvar/jsonio.py
from __future__ import annotations

import json
import math
from json import encoder as _json_encoder
from typing import Any

FLOAT_FORMAT = ".16e"  # 17 significant digits


def format_float(v: float) -> str:
    if not math.isfinite(v):
        raise ValueError(f"Out of range float values are not JSON compliant: {v!r}")
    return format(v, FLOAT_FORMAT)


class FullPrecisionEncoder(json.JSONEncoder):
    """json.JSONEncoder that writes every float with 17 significant digits."""

    def iterencode(self, o: Any, _one_shot: bool = False):
        markers = {} if self.check_circular else None
        _encoder = _json_encoder.encode_basestring_ascii if self.ensure_ascii else _json_encoder.encode_basestring
        # pure-Python path only: the C encoder hardcodes float.__repr__
        _iterencode = _json_encoder._make_iterencode(
            markers, self.default, _encoder, self.indent, format_float,
            self.key_separator, self.item_separator, self.sort_keys,
            self.skipkeys, _one_shot,
        )
        return _iterencode(o, 0)


def dumps(obj: Any, **kwargs: Any) -> str:
    return json.dumps(obj, cls=FullPrecisionEncoder, **kwargs)
