"""On-disk formats: flat binary volumes, FSL-style gradient tables and
named-tensor checkpoint archives.

Volumes are little-endian float32 payloads with a JSON sidecar carrying
dims/dtype/normalization. Checkpoints are a single file: an 8-byte
little-endian manifest length, a JSON manifest (tensor name, shape,
dtype, byte offset into the payload, plus free-form metadata), then the
raw payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .phantom import GradientTable


class FileFormatError(IOError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------

def write_volume(path_base, data: np.ndarray, b0_normalized: bool = True,
                 extra: dict | None = None) -> tuple[Path, Path]:
    """Write array as <base>.f32 (little-endian float32, C order) + <base>.json."""
    base = Path(path_base)
    bin_path = base.with_suffix(".f32")
    sidecar_path = base.with_suffix(".json")
    arr = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    bin_path.write_bytes(arr.tobytes())
    sidecar = {
        "dims": list(arr.shape),
        "dtype": "<f4",
        "order": "C",
        "b0_normalized": bool(b0_normalized),
    }
    if extra:
        sidecar.update(extra)
    sidecar_path.write_text(json.dumps(sidecar, indent=1))
    return bin_path, sidecar_path


def read_volume(path_base) -> tuple[np.ndarray, dict]:
    base = Path(path_base)
    sidecar_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".f32")
    if not sidecar_path.exists() or not bin_path.exists():
        raise FileFormatError(f"missing volume files for {base}")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar.get("dtype") != "<f4" or sidecar.get("order", "C") != "C":
        raise FileFormatError(f"unsupported volume encoding in {sidecar_path}")
    dims = tuple(sidecar["dims"])
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise FileFormatError(
            f"{bin_path}: payload has {raw.size} values, dims say {dims}"
        )
    return raw.reshape(dims).astype(np.float64), sidecar


# ---------------------------------------------------------------------------
# Gradient tables (FSL bvals / bvecs text layout)
# ---------------------------------------------------------------------------

def write_gradient_table(dirpath, table: GradientTable,
                         stem: str = "") -> tuple[Path, Path]:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    bvals_path = d / f"{stem}bvals"
    bvecs_path = d / f"{stem}bvecs"
    bvals_path.write_text(" ".join(f"{v:.6g}" for v in table.bvals) + "\n")
    lines = [" ".join(f"{v:.17g}" for v in table.bvecs[:, ax]) for ax in range(3)]
    bvecs_path.write_text("\n".join(lines) + "\n")
    return bvals_path, bvecs_path


def read_gradient_table(dirpath, stem: str = "") -> GradientTable:
    d = Path(dirpath)
    bvals_path = d / f"{stem}bvals"
    bvecs_path = d / f"{stem}bvecs"
    if not bvals_path.exists() or not bvecs_path.exists():
        raise FileFormatError(f"missing bvals/bvecs under {d}")
    bvals = np.loadtxt(bvals_path, ndmin=1)
    bvecs = np.loadtxt(bvecs_path, ndmin=2)
    if bvecs.shape[0] != 3:
        raise FileFormatError(f"{bvecs_path}: expected 3 rows, got {bvecs.shape[0]}")
    return GradientTable(bvals=bvals, bvecs=bvecs.T)


# ---------------------------------------------------------------------------
# Named-tensor checkpoint archive
# ---------------------------------------------------------------------------

_MAGIC = struct.Struct("<Q")


def save_tensors(path, tensors: dict[str, np.ndarray],
                 meta: dict | None = None):
    entries = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        buf = np.ascontiguousarray(arr, dtype=le).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": le.str,
            "offset": len(payload),
            "nbytes": len(buf),
        })
        payload.extend(buf)
    manifest = {"tensors": entries, "meta": meta or {}}
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC.pack(len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = fh.read(_MAGIC.size)
        if len(header) != _MAGIC.size:
            raise FileFormatError(f"{path}: truncated header")
        (mlen,) = _MAGIC.unpack(header)
        blob = fh.read(mlen)
        if len(blob) != mlen:
            raise FileFormatError(f"{path}: truncated manifest")
        manifest = json.loads(blob.decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise FileFormatError(f"{path}: tensor {entry['name']!r} out of bounds")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=entry["dtype"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, manifest.get("meta", {})
