"""Named-array archives: a ``manifest.json`` plus one raw little-endian array file per entry.

The same container is used for body models, attachment maps and per-frame offsets.
An archive is either a directory or a zip file holding the same members.
"""

import json
import os
import zipfile
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
FORMAT_TAG = "meshmotion-archive"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int64": "<i8", "uint8": "u1"}


class ArchiveError(ValueError):
    pass


def write_archive(path, arrays: dict, meta: dict | None = None, dtypes: dict | None = None) -> Path:
    """Write ``arrays`` to ``path`` (a directory, or a zip if the name ends in .zip).

    Floating arrays default to float32 and integer arrays to int32 unless ``dtypes`` says otherwise.
    """
    path = Path(path)
    dtypes = dtypes or {}
    entries = []
    blobs = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = dtypes.get(name)
        if dt is None:
            dt = "int32" if np.issubdtype(arr.dtype, np.integer) else ("uint8" if arr.dtype == bool else "float32")
        if dt not in _DTYPES:
            raise ArchiveError(f"unsupported dtype {dt!r} for {name}")
        fname = f"{name}.bin"
        blobs[fname] = np.ascontiguousarray(arr.astype(_DTYPES[dt])).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt, "file": fname})
    manifest = {"format": FORMAT_TAG, "version": 1, "arrays": entries, "meta": meta or {}}
    text = json.dumps(manifest, indent=2, sort_keys=True)
    if path.suffix == ".zip":
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr(MANIFEST, text)
            for fname, data in blobs.items():
                zf.writestr(fname, data)
    else:
        path.mkdir(parents=True, exist_ok=True)
        (path / MANIFEST).write_text(text)
        for fname, data in blobs.items():
            (path / fname).write_bytes(data)
    return path


def _reader(path: Path):
    if path.is_dir():
        return lambda member: (path / member).read_bytes()
    if zipfile.is_zipfile(path):
        zf = zipfile.ZipFile(path)
        return zf.read
    raise ArchiveError(f"{path} is neither an archive directory nor a zip file")


def read_archive(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``; arrays keep the dtype recorded in the manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    read = _reader(path)
    try:
        manifest = json.loads(read(MANIFEST))
    except KeyError as exc:
        raise ArchiveError(f"{path}: {MANIFEST} absent") from exc
    except FileNotFoundError as exc:
        raise ArchiveError(f"{path}: {MANIFEST} absent") from exc
    arrays = {}
    for entry in manifest.get("arrays", []):
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise ArchiveError(f"{entry['name']}: unsupported dtype {entry['dtype']!r}")
        raw = read(entry.get("file", entry["name"] + ".bin"))
        arr = np.frombuffer(raw, dtype=dt)
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise ArchiveError(f"{entry['name']}: {arr.size} values on disk, manifest shape {entry['shape']}")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, manifest.get("meta", {})


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_raw_array(path, arr: np.ndarray, layout: str = "h×w×c") -> None:
    """One float32 array plus a JSON sidecar ``<path>.json`` (shape, dtype, layout)."""
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    path.write_bytes(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": "float32", "layout": layout}
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar))


def read_raw_array(path) -> np.ndarray:
    path = Path(path)
    sidecar = json.loads(path.with_name(path.name + ".json").read_text())
    dt = _DTYPES.get(sidecar.get("dtype", "float32"))
    if dt is None:
        raise ArchiveError(f"{path}: unsupported dtype {sidecar.get('dtype')!r}")
    data = np.frombuffer(path.read_bytes(), dtype=dt)
    return data.reshape(sidecar["shape"]).astype(np.float32)

