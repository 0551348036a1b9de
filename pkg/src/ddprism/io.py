"""Self-describing array files and model checkpoints.

Binary layout::

    b"DDPRISM\\0"  | uint64 LE header length | UTF-8 JSON header | payload

The header lists every array with its byte offset into the payload, shape and
dtype (always little-endian float64, row-major). A pure-JSON variant stores the
same header with the array values inlined; readers detect the variant from the
first byte. Headers are written with sorted keys so identical content gives
byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .denoiser import ContractError, Denoiser, GaussianDenoiser, MLPDenoiser
from .sde import NoiseSchedule

MAGIC = b"DDPRISM\0"
FORMAT_VERSION = 1
_DTYPE = "<f8"


class FormatError(ValueError):
    """Raised for unreadable or incompatible files."""


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_arrays(path, kind: str, meta: dict, arrays: dict, fmt: str = "binary"):
    """Write named float arrays plus JSON metadata to ``path``."""
    path = Path(path)
    arrays = {k: np.array(v, dtype=_DTYPE, order="C") for k, v in arrays.items()}
    header = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta}
    if fmt == "json":
        header["arrays"] = {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in arrays.items()}
        _atomic_write(path, (_dumps(header) + "\n").encode())
        return
    if fmt != "binary":
        raise ContractError(f"unknown format {fmt!r}")
    index, offset = {}, 0
    for k in sorted(arrays):
        a = arrays[k]
        index[k] = {"offset": offset, "shape": list(a.shape), "dtype": _DTYPE}
        offset += a.nbytes
    header["arrays"] = index
    head = _dumps(header).encode()
    payload = b"".join(arrays[k].tobytes() for k in sorted(arrays))
    _atomic_write(path, MAGIC + struct.pack("<Q", len(head)) + head + payload)


def read_header(path) -> dict:
    path = Path(path)
    with open(path, "rb") as fh:
        start = fh.read(len(MAGIC))
        if start == MAGIC:
            (n,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(n).decode())
            header["_payload_offset"] = len(MAGIC) + 8 + n
        elif start[:1] == b"{":
            fh.seek(0)
            header = json.loads(fh.read().decode())
            header["_payload_offset"] = None
        else:
            raise FormatError(f"{path}: not a ddprism file")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')}")
    return header


def read_arrays(path, names=None, header: dict | None = None) -> dict:
    """Read the named arrays (all when ``names`` is None)."""
    header = header if header is not None else read_header(path)
    index = header["arrays"]
    names = list(index) if names is None else list(names)
    missing = [k for k in names if k not in index]
    if missing:
        raise FormatError(f"{path}: missing arrays {missing}")
    out = {}
    if header["_payload_offset"] is None:
        for k in names:
            out[k] = np.asarray(index[k]["data"], dtype=float).reshape(index[k]["shape"])
        return out
    with open(path, "rb") as fh:
        for k in names:
            shape = tuple(index[k]["shape"])
            fh.seek(header["_payload_offset"] + index[k]["offset"])
            count = int(np.prod(shape, dtype=np.int64))
            out[k] = np.fromfile(fh, dtype=_DTYPE, count=count).reshape(shape).astype(float)
    return out


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: Denoiser, schedule: NoiseSchedule, extra: dict | None = None, fmt="binary"):
    """Serialize an MLP or Gaussian denoiser together with its noise schedule."""
    meta = {"schedule": {"sigma_min": schedule.sigma_min, "sigma_max": schedule.sigma_max}, "extra": extra or {}}
    if isinstance(model, MLPDenoiser):
        meta["model"] = model.config()
        meta["widths"] = model.widths
        write_arrays(path, "mlp-denoiser", meta, model.params, fmt=fmt)
    elif isinstance(model, GaussianDenoiser):
        meta["model"] = {"dim": model.dim}
        write_arrays(path, "gaussian-denoiser", meta, {"mean": model.mean, "covariance": model.covariance}, fmt=fmt)
    else:
        raise ContractError(f"cannot serialize {type(model).__name__}")


def load_checkpoint(path) -> tuple[Denoiser, NoiseSchedule, dict]:
    header = read_header(path)
    meta = header["meta"]
    schedule = NoiseSchedule(**meta["schedule"])
    arrays = read_arrays(path, header=header)
    if header["kind"] == "mlp-denoiser":
        cfg = dict(meta["model"])
        model = MLPDenoiser(**cfg, rng=0)
        if set(arrays) != set(model.params):
            raise FormatError(f"{path}: parameter names do not match the architecture")
        for k, a in arrays.items():
            if a.shape != model.params[k].shape:
                raise FormatError(f"{path}: {k} has shape {a.shape}, expected {model.params[k].shape}")
            model.params[k] = a
    elif header["kind"] == "gaussian-denoiser":
        model = GaussianDenoiser(arrays["mean"], arrays["covariance"])
    else:
        raise FormatError(f"{path}: unknown checkpoint kind {header['kind']!r}")
    return model, schedule, meta.get("extra", {})
