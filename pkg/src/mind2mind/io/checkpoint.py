"""Network checkpoints: ``manifest.json`` beside a little-endian float64 blob."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from ..nn import MlpSpec, Network

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _arrays(net: Network):
    for group in ("params", "state"):
        for key in sorted(getattr(net, group)):
            yield group, key, getattr(net, group)[key]


def save_checkpoint(nets: Mapping[str, Network], path) -> Path:
    """Write every network under ``path/``; the manifest lists each array's
    byte range in the blob and its sha256. No timestamps, so equal networks
    give equal files."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    entries = []
    for name in sorted(nets):
        net = nets[name]
        arrays = []
        for group, key, arr in _arrays(net):
            raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C")
            arrays.append({"group": group, "key": key, "shape": list(arr.shape),
                           "offset": len(blob), "nbytes": len(raw),
                           "sha256": hashlib.sha256(raw).hexdigest()})
            blob += raw
        entries.append({"name": name, "spec": net.spec.to_dict(), "arrays": arrays})
    manifest = {"format_version": FORMAT_VERSION, "dtype": "float64-le", "order": "C",
                "blob": BLOB, "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
                "created_by": "mind2mind", "networks": entries}
    (d / BLOB).write_bytes(bytes(blob))
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def read_manifest(path) -> dict:
    try:
        manifest = json.loads((Path(path) / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest in {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint format_version {version!r}")
    return manifest


def load_checkpoint(path) -> dict[str, Network]:
    d = Path(path)
    manifest = read_manifest(d)
    blob = (d / manifest.get("blob", BLOB)).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError("weight blob checksum mismatch")
    spans = []
    nets = {}
    for entry in manifest["networks"]:
        groups = {"params": {}, "state": {}}
        for a in entry["arrays"]:
            lo, hi = a["offset"], a["offset"] + a["nbytes"]
            if hi > len(blob):
                raise CheckpointError(f"{entry['name']}/{a['key']} runs past the blob")
            spans.append((lo, hi))
            raw = blob[lo:hi]
            if hashlib.sha256(raw).hexdigest() != a["sha256"]:
                raise CheckpointError(f"checksum mismatch in {entry['name']}/{a['key']}")
            shape = tuple(a["shape"])
            if int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize != a["nbytes"]:
                raise CheckpointError(f"{entry['name']}/{a['key']}: shape and size disagree")
            groups[a["group"]][a["key"]] = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float64)
        nets[entry["name"]] = Network(MlpSpec.from_dict(entry["spec"]), groups["params"],
                                      groups["state"])
    spans.sort()
    for (_, hi), (lo, _) in zip(spans, spans[1:]):
        if lo < hi:
            raise CheckpointError("overlapping array ranges in manifest")
    return nets
