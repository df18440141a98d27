"""On-disk formats for datasets, checkpoints and result tables.

Dataset file::

    GNNRRMDS\\n
    {json header: version, config, shapes, meta}\\n
    tx | rx | H | weights | noise    as little-endian f64, complex interleaved re/im

Checkpoint: the binary block from :func:`nngrad.pack_arrays` plus a JSON
sidecar (``<path>.json``) holding the architecture.  Everything here is
deterministic, so save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import nngrad as ng
from .nngrad import CheckpointError
from .scenario import Dataset, SystemConfig
from .wcgcn import WcgcnParams

DATASET_MAGIC = b"GNNRRMDS\n"
DATASET_VERSION = 1
CKPT_META_VERSION = 1

RESULT_FIELDS = ["method", "K", "setting", "mean_objective", "ratio"]
TIMING_FIELDS = ["method", "K", "setting", "wall_time_mean", "wall_time_std"]


class FormatError(ValueError):
    pass


# -- datasets -----------------------------------------------------------------

_ARRAYS = ("tx", "rx", "H", "weights", "noise")


def _as_real(a: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(a):
        return np.ascontiguousarray(a).view(np.float64).reshape(a.shape + (2,))
    return a


def dataset_to_bytes(ds: Dataset) -> bytes:
    header = {
        "version": DATASET_VERSION,
        "config": ds.cfg.to_dict(),
        "shapes": {k: list(getattr(ds, k).shape) for k in _ARRAYS},
        "meta": ds.meta,
    }
    parts = [DATASET_MAGIC, json.dumps(header, sort_keys=True).encode() + b"\n"]
    for k in _ARRAYS:
        parts.append(np.asarray(_as_real(getattr(ds, k)), dtype="<f8").tobytes())
    return b"".join(parts)


def dataset_from_bytes(blob: bytes) -> Dataset:
    if not blob.startswith(DATASET_MAGIC):
        raise FormatError("not a dataset file (bad magic)")
    end = blob.find(b"\n", len(DATASET_MAGIC))
    if end < 0:
        raise FormatError("dataset header is not terminated")
    header = json.loads(blob[len(DATASET_MAGIC):end])
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"dataset version {header.get('version')}, this build reads {DATASET_VERSION}")
    off = end + 1
    arrays = {}
    for k in _ARRAYS:
        shape = tuple(header["shapes"][k])
        real_shape = shape + (2,) if k == "H" else shape
        n = int(np.prod(real_shape, dtype=np.int64))
        if off + 8 * n > len(blob):
            raise FormatError("truncated dataset file")
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(real_shape).astype(float)
        off += 8 * n
        arrays[k] = a[..., 0] + 1j * a[..., 1] if k == "H" else a
    if off != len(blob):
        raise FormatError("trailing bytes in dataset file")
    cfg = SystemConfig.from_dict(header["config"])
    return Dataset(cfg, arrays["tx"], arrays["rx"], arrays["H"], arrays["weights"],
                   arrays["noise"], header["meta"])


def dataset_to_json(ds: Dataset) -> str:
    """Human-readable variant for small sets; floats survive via repr round-trip."""
    return json.dumps({
        "version": DATASET_VERSION,
        "config": ds.cfg.to_dict(),
        "meta": ds.meta,
        "tx": ds.tx.tolist(),
        "rx": ds.rx.tolist(),
        "H": _as_real(ds.H).tolist(),
        "weights": ds.weights.tolist(),
        "noise": ds.noise.tolist(),
    }, sort_keys=True)


def dataset_from_json(text: str) -> Dataset:
    d = json.loads(text)
    if d.get("version") != DATASET_VERSION:
        raise FormatError(f"dataset version {d.get('version')}, this build reads {DATASET_VERSION}")
    H = np.asarray(d["H"], dtype=float)
    return Dataset(SystemConfig.from_dict(d["config"]), np.asarray(d["tx"], dtype=float),
                   np.asarray(d["rx"], dtype=float), H[..., 0] + 1j * H[..., 1],
                   np.asarray(d["weights"], dtype=float), np.asarray(d["noise"], dtype=float), d["meta"])


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(dataset_to_json(ds))
    else:
        path.write_bytes(dataset_to_bytes(ds))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".json":
        return dataset_from_json(path.read_text())
    return dataset_from_bytes(path.read_bytes())


# -- checkpoints --------------------------------------------------------------

def checkpoint_meta(params: WcgcnParams) -> dict:
    return {"version": CKPT_META_VERSION, "format": ng.CKPT_VERSION, **params.meta()}


def save_checkpoint(params: WcgcnParams, path) -> Path:
    path = Path(path)
    path.write_bytes(ng.pack_arrays(params.arrays()))
    Path(str(path) + ".json").write_text(json.dumps(checkpoint_meta(params), sort_keys=True, indent=1))
    return path


def load_checkpoint(path) -> WcgcnParams:
    path = Path(path)
    side = Path(str(path) + ".json")
    if not side.exists():
        raise CheckpointError(f"missing checkpoint sidecar {side}")
    meta = json.loads(side.read_text())
    if meta.get("version") != CKPT_META_VERSION:
        raise CheckpointError(f"checkpoint meta version {meta.get('version')}, expected {CKPT_META_VERSION}")
    arrays = ng.unpack_arrays(path.read_bytes())
    return params_from_arrays(meta, arrays)


def params_from_arrays(meta: dict, arrays) -> WcgcnParams:
    n1 = 2 * (len(meta["mlp1"]) - 1)
    n2 = 2 * (len(meta["mlp2"]) - 1)
    if len(arrays) != n1 + n2:
        raise CheckpointError(f"checkpoint holds {len(arrays)} arrays, architecture needs {n1 + n2}")
    mlp1 = ng.MlpParams.from_arrays(arrays[:n1])
    mlp2 = ng.MlpParams.from_arrays(arrays[n1:])
    if list(mlp1.widths) != list(meta["mlp1"]) or list(mlp2.widths) != list(meta["mlp2"]):
        raise CheckpointError("checkpoint array shapes disagree with the recorded widths")
    return WcgcnParams(mlp1, mlp2, meta["num_tx_antennas"], meta["num_layers"], meta["beta"],
                       meta["features"], meta["aggregator"])


# -- results ------------------------------------------------------------------

def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def rows_to_csv(rows, fields=RESULT_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return buf.getvalue()


def write_csv(rows, path, fields=RESULT_FIELDS) -> Path:
    path = Path(path)
    path.write_text(rows_to_csv(rows, fields))
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
