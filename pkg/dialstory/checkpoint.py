"""
Checkpoint container: a zip archive of .npy members (numpy's own array format) plus a
JSON header. Every member is written with a fixed timestamp and sorted order, so a
checkpoint is byte-stable for a fixed precision mode.

Layout:
    header.json              format tag, version, dtype, model config, optimizer header, extras
    params/<name>.npy        one member per parameter
    optim/<name>.npy         Adam moments (optional)
"""

import io
import json
import zipfile

import numpy as np

from dialstory.artifacts import atomic_write_bytes
from dialstory.errors import DataError

FORMAT_TAG = "dialstory-checkpoint"
FORMAT_VERSION = 1
_FIXED_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


def _member(name):
    info = zipfile.ZipInfo(name, date_time=_FIXED_TIMESTAMP)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def _array_bytes(array):
    buffer = io.BytesIO()
    np.lib.format.write_array(buffer, np.ascontiguousarray(array), allow_pickle=False)
    return buffer.getvalue()


def encode_checkpoint(header, params, optimizer_arrays=None):
    """Build the checkpoint bytes. params / optimizer_arrays map names to arrays."""
    header = dict(header)
    header["format"] = FORMAT_TAG
    header["version"] = FORMAT_VERSION
    header["parameters"] = {name: list(params[name].shape) for name in sorted(params)}
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w") as archive:
        archive.writestr(_member("header.json"), json.dumps(header, sort_keys=True, indent=2))
        for name in sorted(params):
            archive.writestr(_member(f"params/{name}.npy"), _array_bytes(params[name]))
        for name in sorted(optimizer_arrays or {}):
            archive.writestr(_member(f"optim/{name}.npy"), _array_bytes(optimizer_arrays[name]))
    return buffer.getvalue()


def save_checkpoint(path, header, params, optimizer_arrays=None):
    """Write a checkpoint atomically."""
    atomic_write_bytes(path, encode_checkpoint(header, params, optimizer_arrays))


def load_checkpoint(path):
    """
    Read a checkpoint.
    Returns:
        tuple: (header dict, params dict, optimizer arrays dict)
    Raises:
        DataError: missing file, foreign format or unsupported version
    """
    try:
        archive = zipfile.ZipFile(path, "r")
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except zipfile.BadZipFile as exc:
        raise DataError(f"{path} is not a checkpoint archive") from exc
    with archive:
        try:
            header = json.loads(archive.read("header.json"))
        except KeyError as exc:
            raise DataError(f"{path} has no header.json") from exc
        if header.get("format") != FORMAT_TAG:
            raise DataError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        if header.get("version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params, optim = {}, {}
        for name in archive.namelist():
            if not name.endswith(".npy"):
                continue
            array = np.lib.format.read_array(io.BytesIO(archive.read(name)), allow_pickle=False)
            key = name[:-len(".npy")]
            if key.startswith("params/"):
                params[key[len("params/"):]] = array
            elif key.startswith("optim/"):
                optim[key[len("optim/"):]] = array
    missing = set(header["parameters"]) - set(params)
    if missing:
        raise DataError(f"{path}: header lists parameters missing from the archive: {sorted(missing)}")
    return header, params, optim
