"""JSON model files.

Layout::

    {"format_version": 1, "input_shape": [...], "class_count": 5,
     "layers": [LayerSpec dicts], "params": {name: {shape, dtype, data}},
     "checksum": CRC32 of the decoded parameter bytes in layer order}

``data`` is base64 of the little-endian raw values.
"""

import base64
import binascii
import json
import zlib

import numpy as np

from nsrobust.errors import NSRError, ChecksumError, FormatVersionError, MalformedModelError
from nsrobust.network import LayerSpec, Model
from nsrobust.tensor import dtype_name

FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


def _payload(arr):
    return np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name(arr.dtype)]).tobytes()


def model_to_json(model):
    params = {}
    crc = 0
    for name in model.param_names():
        arr = model.params[name]
        raw = _payload(arr)
        crc = zlib.crc32(raw, crc)
        params[name] = {
            "shape": list(arr.shape),
            "dtype": dtype_name(arr.dtype),
            "data": base64.b64encode(raw).decode("ascii"),
        }
    doc = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": [layer.to_dict() for layer in model.layers],
        "params": params,
        "checksum": crc,
    }
    return json.dumps(doc, indent=1)


def model_from_json(text, source="<string>"):
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedModelError(f"{source}: not a JSON document ({exc})")
    if not isinstance(doc, dict):
        raise MalformedModelError(f"{source}: top level must be an object")
    version = doc.get("format_version")
    if not isinstance(version, int):
        raise MalformedModelError(f"{source}: missing integer format_version")
    if version > FORMAT_VERSION:
        raise FormatVersionError(
            f"{source}: file format version {version} is newer than supported version {FORMAT_VERSION}")
    try:
        layers = [LayerSpec.from_dict(d) for d in doc["layers"]]
        raw_params = doc["params"]
        stored_crc = doc["checksum"]
        input_shape = tuple(doc["input_shape"])
        class_count = int(doc["class_count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedModelError(f"{source}: malformed model document ({exc!r})")

    names = [f"{i}.{kind}" for i, layer in enumerate(layers)
             for kind in (("weight", "bias") if layer.bias else ("weight",)) if layer.has_params]
    if set(names) != set(raw_params):
        raise MalformedModelError(f"{source}: parameter set {sorted(raw_params)} != {sorted(names)}")
    params = {}
    crc = 0
    for name in names:
        entry = raw_params[name]
        try:
            raw = base64.b64decode(entry["data"], validate=True)
            dt = np.dtype(_DTYPES[entry["dtype"]])
            arr = np.frombuffer(raw, dtype=dt).reshape(entry["shape"])
        except (KeyError, TypeError, ValueError, binascii.Error) as exc:
            raise MalformedModelError(f"{source}: bad parameter {name} ({exc!r})")
        crc = zlib.crc32(raw, crc)
        params[name] = arr.astype(dt.newbyteorder("="))
    if crc != stored_crc:
        raise ChecksumError(f"{source}: checksum {crc} does not match stored {stored_crc}")
    try:
        return Model(layers, params, input_shape, class_count)
    except NSRError as exc:
        raise MalformedModelError(f"{source}: inconsistent model ({exc})")


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_to_json(model))


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json(fh.read(), source=str(path))
