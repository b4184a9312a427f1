"""Named-tensor container used for models, virtual datasets and datasets.

Layout (all integers little-endian)::

    bytes 0..3    magic b"FVCK"
    bytes 4..7    uint32 format version (1)
    bytes 8..15   uint64 header length L
    next L bytes  UTF-8 JSON: {"kind": str, "meta": {...},
                               "tensors": [{"name", "dtype", "shape"}, ...]}
    payloads      one per header entry, in order, row-major; dtype "f8"
                  is float64 and "i8" is int64, both little-endian

There is no padding between payloads.
"""
import json
import struct

import numpy as np

from .errors import ContractViolation

MAGIC = b"FVCK"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def dumps(kind, tensors, meta=None):
    entries, payloads = [], []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps({"kind": kind, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(header)), header] + payloads)


def loads(raw):
    """-> (kind, meta, {name: array})"""
    if raw[:4] != MAGIC:
        raise ContractViolation("checkpoint: bad magic")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise ContractViolation(f"checkpoint: unsupported version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(raw):
            raise ContractViolation(f"checkpoint: truncated payload for {e['name']}")
        tensors[e["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(e["shape"]).copy()
        pos += nbytes
    if pos != len(raw):
        raise ContractViolation("checkpoint: trailing bytes")
    return header["kind"], header["meta"], tensors


def save(path, kind, tensors, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps(kind, tensors, meta))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


# typed wrappers ------------------------------------------------------------

def save_model(path, params):
    meta = {"arch_tag": params.arch_tag, "feature_dim": params.feature_dim, "spec": params.spec,
            "extractor": list(params.extractor), "head": list(params.head)}
    save(path, "model", params.arrays(), meta)


def load_model(path):
    from .models import ModelParams
    kind, meta, tensors = load(path)
    if kind != "model":
        raise ContractViolation(f"checkpoint: expected a model, found {kind!r}")
    return ModelParams(meta["arch_tag"], {k: tensors[k] for k in meta["extractor"]},
                       {k: tensors[k] for k in meta["head"]}, meta["feature_dim"], meta["spec"])


def save_virtual(path, virtual):
    save(path, "virtual", {"images": virtual.images, "labels": virtual.labels,
                           "pix_min": virtual.pix_min, "pix_max": virtual.pix_max},
         {"ipc": virtual.ipc})


def load_virtual(path):
    from .distill import VirtualDataset
    kind, meta, t = load(path)
    if kind != "virtual":
        raise ContractViolation(f"checkpoint: expected a virtual dataset, found {kind!r}")
    return VirtualDataset(t["images"], t["labels"], meta["ipc"], t["pix_min"], t["pix_max"])


def save_dataset(path, ds):
    save(path, "dataset", {"images": ds.images, "labels": ds.labels},
         {"class_count": ds.class_count, "provenance": ds.provenance,
          "pixel_range": list(ds.pixel_range)})


def load_dataset(path):
    from .data import LabeledDataset
    kind, meta, t = load(path)
    if kind != "dataset":
        raise ContractViolation(f"checkpoint: expected a dataset, found {kind!r}")
    return LabeledDataset(t["images"], t["labels"], meta["class_count"], meta["provenance"],
                          tuple(meta["pixel_range"]))
