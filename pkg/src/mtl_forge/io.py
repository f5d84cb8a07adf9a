"""Byte-deterministic array archives (zip of .npy members plus a JSON header)."""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)
_META = "meta.json"


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``arrays`` and ``meta``; identical inputs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    with zipfile.ZipFile(tmp, "w") as zf:
        _member(zf, _META, json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _member(zf, name + ".npy", buf.getvalue())
    tmp.replace(path)


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read(_META))
        for name in zf.namelist():
            if name == _META:
                continue
            with zf.open(name) as fh:
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(fh.read()),
                                                             allow_pickle=False)
    return arrays, meta
