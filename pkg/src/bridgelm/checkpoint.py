"""Parameter archive: a zip of raw little-endian f64 payloads plus a JSON manifest."""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    # fixed timestamps keep archives byte-reproducible
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, (name, arr) in enumerate(params.items()):
            member = f"params/{i:05d}.f64"
            entries[name] = {"shape": list(arr.shape), "file": member}
            info = zipfile.ZipInfo(member, date_time=stamp)
            zf.writestr(info, np.ascontiguousarray(arr, dtype="<f8").tobytes(), zipfile.ZIP_DEFLATED)
        manifest = {
            "format_version": FORMAT_VERSION,
            "config": config,
            "config_hash": config_hash(config),
            "params": entries,
            **(extra or {}),
        }
        info = zipfile.ZipInfo(MANIFEST, date_time=stamp)
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True), zipfile.ZIP_DEFLATED)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read(MANIFEST))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
        params = {}
        for name, entry in manifest["params"].items():
            raw = zf.read(entry["file"])
            params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
    return params, manifest


def params_digest(params: dict[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and bytes, in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
