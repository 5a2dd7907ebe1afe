"""Saliency map files: 16-bit PGM with a JSON sidecar, and raw "CTSM" float blobs."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import read_netpbm, write_netpbm
from .saliency import SaliencyMap

CTSM_MAGIC = b"CTSM"
CTSM_VERSION = 1


def write_saliency(path, smap: SaliencyMap, seed: int = 0, config_hash: str = "") -> None:
    """Write ``path`` (.pgm, values ``round(65535 v)``) and ``path`` + ``.json``."""
    path = Path(path)
    pixels = np.round(np.asarray(smap.values, dtype=np.float64) * 65535).astype(np.uint16)
    write_netpbm(path, pixels, maxval=65535)
    sidecar = {
        "method": smap.method,
        "class": smap.explained_class,
        "variant": smap.variant,
        "seed": seed,
        "config_hash": config_hash,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def read_saliency(path) -> SaliencyMap:
    path = Path(path)
    pix, maxval = read_netpbm(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    values = (pix[..., 0].astype(np.float64) / maxval).astype(np.float32)
    return SaliencyMap(values, meta["class"], meta["method"], meta["variant"], info=meta)


def write_raw(path, values) -> None:
    values = np.asarray(values)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(CTSM_MAGIC + struct.pack("<HII", CTSM_VERSION, h, w))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != CTSM_MAGIC:
        raise ValueError(f"bad magic at offset 0: expected {CTSM_MAGIC!r}, got {data[:4]!r}")
    version, h, w = struct.unpack_from("<HII", data, 4)
    if version != CTSM_VERSION:
        raise ValueError(f"unsupported CTSM version {version}")
    if len(data) != 14 + 4 * h * w:
        raise ValueError(f"truncated CTSM data: expected {14 + 4 * h * w} bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=14).reshape(h, w).astype(np.float32)
