"""``.dbm`` model files.

Layout::

    b"DBM\\x00"                      magic
    uint64 little-endian            header length in bytes
    header                          UTF-8 JSON
    blob                            little-endian float tensors, header order

The header records ``format_version``, the architecture of every stage,
scalar hyperparameters and the name/shape of every tensor. Exported models
use 32-bit floats; checkpoints use 64-bit floats so training resumes
exactly.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import (CorruptModelError, ModelFileError, ModelInvariantError,
                     ModelVersionError)
from .features import ArchSpec, StageParams
from .pipeline import FORMAT_VERSION, MultiScaleModel, ScaleNetwork

MAGIC = b"DBM\x00"
DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def architecture(model):
    return {
        "resize_policy": model.resize_policy,
        "sharpen_sigma": model.sharpen_sigma,
        "scales": [{
            "kernel_size": net.kernel_size,
            "beta_k": net.beta_k,
            "stages": [st.arch.to_dict() for st in net.stages],
        } for net in model.scales],
    }


def config_hash(model):
    """Hash of the architecture description (independent of weights)."""
    blob = json.dumps(architecture(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _named_tensors(model):
    for si, net in enumerate(model.scales):
        for ti, st in enumerate(net.stages):
            for name, arr in st.named_arrays().items():
                yield f"s{si}.t{ti}.{name}", arr


def model_id(model):
    h = hashlib.sha256()
    for name, arr in _named_tensors(model):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def save_model(model, path, dtype="<f4", extra=None, extra_tensors=None):
    """Write ``model`` to ``path``.

    ``extra`` (JSON-serializable) and ``extra_tensors`` (name -> array) carry
    checkpoint state such as optimizer accumulators.
    """
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    dt = DTYPES[dtype]
    tensors = list(_named_tensors(model))
    tensors += [(f"extra.{k}", np.asarray(v)) for k, v in (extra_tensors or {}).items()]
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format": "deblurnet-model",
        "format_version": model.format_version,
        "dtype": dtype,
        "architecture": architecture(model),
        "metadata": model.metadata,
        "tensors": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def read_model_file(path):
    """Parse a model file; returns ``(header, tensors)``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptModelError(f"{path}: not a model file (bad magic or truncated)")
    (hlen,) = struct.unpack("<Q", data[4:12])
    if 12 + hlen > len(data):
        raise CorruptModelError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptModelError(f"{path}: unreadable header ({exc})") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelVersionError(
            f"{path}: file format_version {version} is not supported "
            f"(this build reads format_version {FORMAT_VERSION})")
    dt = DTYPES.get(header.get("dtype"))
    if dt is None:
        raise CorruptModelError(f"{path}: unknown tensor dtype {header.get('dtype')!r}")
    blob = data[12 + hlen:]
    tensors = {}
    try:
        for e in header["tensors"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            if e["offset"] + count * dt.itemsize > len(blob) or e["nbytes"] != count * dt.itemsize:
                raise CorruptModelError(f"{path}: tensor {e['name']} truncated")
            arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"])
            tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorruptModelError):
            raise
        raise CorruptModelError(f"{path}: malformed tensor table ({exc})") from exc
    return header, tensors


def model_from_parts(header, tensors):
    arch = header["architecture"]
    scales = []
    try:
        for si, sd in enumerate(arch["scales"]):
            stages = []
            for ti, ad in enumerate(sd["stages"]):
                a = ArchSpec.from_dict(ad)
                p = f"s{si}.t{ti}."
                nh = len(a.hidden)
                zeros = lambda n: np.zeros(n)
                stages.append(StageParams(
                    a, tensors[p + "conv_w"],
                    tensors.get(p + "conv_b", zeros(a.num_filters)),
                    [tensors[p + f"hidden{i}_w"] for i in range(nh)],
                    [tensors.get(p + f"hidden{i}_b", zeros(a.hidden[i])) for i in range(nh)],
                    tensors[p + "alpha"], tensors[p + "beta"],
                    np.array(tensors[p + "log_beta_x"]).reshape(())))
            scales.append(ScaleNetwork(stages, int(sd["kernel_size"]), float(sd["beta_k"])))
        model = MultiScaleModel(scales, header["format_version"], arch["resize_policy"],
                                arch["sharpen_sigma"], header.get("metadata", {}))
    except (KeyError, TypeError) as exc:
        raise CorruptModelError(f"model description incomplete: {exc}") from exc
    try:
        model.check()
    except (ValueError, ArithmeticError) as exc:
        raise ModelInvariantError(f"model violates invariants: {exc}") from exc
    return model


def load_model(path, with_extra=False):
    """Read and validate a model file.

    With ``with_extra=True`` returns ``(model, extra_header, extra_tensors)``.
    """
    header, tensors = read_model_file(path)
    model = model_from_parts(header, tensors)
    if not with_extra:
        return model
    extra_t = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
    return model, header.get("extra", {}), extra_t
