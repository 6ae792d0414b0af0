"""Dataset generation, serialization, and manifest handling.

A dataset holds, per SNR condition, ``n_per_snr`` records of a parameter
draw plus ``m_d`` i.i.d. measurement vectors.  On disk it is a JSON
manifest next to one raw little-endian float64 blob per SNR group,
row-major ``[record x (d_theta + m_d*d_x)]``, each blob carrying a CRC32.

Generation is reproducible across processes: group ``i`` uses an
independent Philox stream keyed by ``(seed, GROUP_STREAM_BASE + i)``
(recorded in the manifest as the ``rng`` field).
"""

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models

FORMAT_VERSION = 1
RNG_NAME = "numpy-philox4x64-v1"
GROUP_STREAM_BASE = 1000


class DatasetError(ValueError):
    pass


class VersionMismatchError(DatasetError):
    pass


class MissingBlobError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class TruncatedBlobError(DatasetError):
    pass


@dataclass
class SnrGroup:
    snr_db: float
    theta: np.ndarray          # (n, d_theta)
    measurements: np.ndarray   # (n, m_d, d_x)

    @property
    def n_records(self):
        return self.theta.shape[0]


@dataclass
class Dataset:
    model_descriptor: dict
    snr_list: list
    m_d: int
    seed: int
    groups: list

    @property
    def d_theta(self):
        return self.groups[0].theta.shape[1]

    @property
    def d_x(self):
        return self.groups[0].measurements.shape[2]

    @property
    def n_per_snr(self):
        return self.groups[0].n_records

    def group(self, snr_db):
        for g in self.groups:
            if g.snr_db == snr_db:
                return g
        raise DatasetError(f"no SNR group {snr_db!r} in dataset")

    def all_theta(self):
        return np.concatenate([g.theta for g in self.groups], axis=0)


def group_rng(seed, group_index):
    key = np.array([seed, GROUP_STREAM_BASE + group_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generate_dataset(model, snr_list, n_per_snr, m_d, seed):
    if n_per_snr < 1 or m_d < 1:
        raise DatasetError("n_per_snr and m_d must be >= 1")
    groups = []
    for i, snr in enumerate(snr_list):
        rng = group_rng(seed, i)
        theta = model.prior.sample(rng, n_per_snr)
        x = model.sample_batch(theta, snr, rng, m_d)
        groups.append(SnrGroup(snr_db=float(snr), theta=theta,
                               measurements=np.ascontiguousarray(x)))
    return Dataset(model_descriptor=model.descriptor(),
                   snr_list=[float(s) for s in snr_list],
                   m_d=int(m_d), seed=int(seed), groups=groups)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _blob_bytes(group, m_d):
    n = group.n_records
    row = np.concatenate(
        [group.theta, group.measurements.reshape(n, -1)], axis=1)
    return np.ascontiguousarray(row, dtype="<f8").tobytes()


def save_dataset(ds, path):
    """Writes ``<path>.manifest.json`` plus one ``.snr<k>.f64`` blob per group."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    blobs = []
    for i, group in enumerate(ds.groups):
        payload = _blob_bytes(group, ds.m_d)
        fname = f"{base.name}.snr{i}.f64"
        (base.parent / fname).write_bytes(payload)
        blobs.append({
            "snr_index": i,
            "snr_db": group.snr_db,
            "file": fname,
            "n_records": group.n_records,
            "crc32": zlib.crc32(payload),
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "rng": RNG_NAME,
        "model": ds.model_descriptor,
        "d_theta": ds.d_theta,
        "d_x": ds.d_x,
        "m_d": ds.m_d,
        "n_per_snr": ds.n_per_snr,
        "snr_list": ds.snr_list,
        "seed": ds.seed,
        "blobs": blobs,
    }
    manifest_path = base.parent / f"{base.name}.manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_dataset(path):
    base = Path(path)
    manifest_path = base if base.name.endswith(".manifest.json") \
        else base.parent / f"{base.name}.manifest.json"
    if not manifest_path.exists():
        raise MissingBlobError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"dataset format version {manifest.get('format_version')} "
            f"(expected {FORMAT_VERSION})")
    d_theta = manifest["d_theta"]
    d_x = manifest["d_x"]
    m_d = manifest["m_d"]
    row_len = d_theta + m_d * d_x
    groups = []
    for blob in manifest["blobs"]:
        blob_path = manifest_path.parent / blob["file"]
        if not blob_path.exists():
            raise MissingBlobError(f"missing blob {blob['file']}")
        payload = blob_path.read_bytes()
        if zlib.crc32(payload) != blob["crc32"]:
            raise ChecksumError(f"checksum failure in {blob['file']}")
        expected = blob["n_records"] * row_len * 8
        if len(payload) != expected:
            raise TruncatedBlobError(
                f"blob {blob['file']} holds {len(payload)} bytes, "
                f"expected {expected}")
        rows = np.frombuffer(payload, dtype="<f8").reshape(
            blob["n_records"], row_len).astype(np.float64)
        groups.append(SnrGroup(
            snr_db=float(blob["snr_db"]),
            theta=np.ascontiguousarray(rows[:, :d_theta]),
            measurements=np.ascontiguousarray(
                rows[:, d_theta:].reshape(blob["n_records"], m_d, d_x)),
        ))
    return Dataset(model_descriptor=manifest["model"],
                   snr_list=[float(s) for s in manifest["snr_list"]],
                   m_d=m_d, seed=manifest["seed"], groups=groups)
