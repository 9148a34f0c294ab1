"""Trained-model persistence.

A model file is a zip archive holding a JSON metadata entry plus raw
little-endian float64 arrays: A as a coordinate list of (row, col, value)
triples, then W_in, b, and W_out. Byte lengths and shapes are declared in
the metadata.
"""

from __future__ import annotations

import dataclasses
import json
import zipfile

import numpy as np
import scipy.sparse as sparse

from .reservoir import FeatureMap, Reservoir, ReservoirParams
from .training import Readout

_META_NAME = "meta.json"
_FORMAT = "esnlyap-model"
_VERSION = 1


def _pack(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_model(path, res: Reservoir, readout: Readout) -> None:
    """Write reservoir + readout to a single archive at path."""
    coo = sparse.coo_matrix(res.A)
    a_list = np.column_stack([coo.row.astype(float), coo.col.astype(float),
                              coo.data.astype(float)])
    arrays = {
        "A": (a_list, {"nnz": int(coo.nnz)}),
        "W_in": (res.W_in, {"shape": list(res.W_in.shape)}),
        "b": (res.b, {"shape": [int(res.b.size)]}),
        "W_out": (readout.W_out, {"shape": list(readout.W_out.shape)}),
    }
    meta = {
        "format": _FORMAT,
        "version": _VERSION,
        "params": dataclasses.asdict(res.params),
        "feature_map": readout.feature_map.kind,
        "ridge": readout.ridge,
        "arrays": {},
    }
    blobs = {}
    for name, (arr, extra) in arrays.items():
        blob = _pack(arr)
        entry = {"byte_length": len(blob), "dtype": "<f8"}
        entry.update(extra)
        meta["arrays"][name] = entry
        blobs[name] = blob
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(_META_NAME, json.dumps(meta, indent=1))
        for name, blob in blobs.items():
            zf.writestr(name + ".bin", blob)


def load_model(path):
    """Read an archive back into (Reservoir, Readout)."""
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read(_META_NAME))
        if meta.get("format") != _FORMAT:
            raise ValueError(f"{path} is not an esnlyap model archive")
        raw = {}
        for name, entry in meta["arrays"].items():
            blob = zf.read(name + ".bin")
            if len(blob) != entry["byte_length"]:
                raise ValueError(f"array {name} has {len(blob)} bytes, "
                                 f"expected {entry['byte_length']}")
            raw[name] = np.frombuffer(blob, dtype="<f8")
    params = ReservoirParams(**meta["params"])
    n = params.n_nodes
    a_entry = meta["arrays"]["A"]
    triples = raw["A"].reshape(a_entry["nnz"], 3)
    A = sparse.csr_matrix(
        (triples[:, 2], (triples[:, 0].astype(int), triples[:, 1].astype(int))),
        shape=(n, n))
    W_in = raw["W_in"].reshape(meta["arrays"]["W_in"]["shape"])
    b = raw["b"].copy()
    res = Reservoir(A=A, W_in=W_in, b=b, params=params)
    W_out = raw["W_out"].reshape(meta["arrays"]["W_out"]["shape"])
    fm = FeatureMap(meta["feature_map"], n)
    readout = Readout(W_out=W_out, feature_map=fm, ridge=meta["ridge"])
    return res, readout
