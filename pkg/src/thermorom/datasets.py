"""Trajectory datasets and the on-disk snapshot archive.

An archive is a directory with a ``header.json`` (system tag, parameter list,
shapes, snapshot spacing, endianness) and one raw little-endian float64
payload per parameter value, row-major in (time, state) order.  Derivative
payloads are optional; when absent they are recomputed by backward
differences on load.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

FORMAT_TAG = "thermorom-snapshots-1"


class ArchiveError(ValueError):
    """Malformed or inconsistent snapshot archive."""


def backward_difference(U, dt):
    """Row n is (U_n - U_{n-1})/dt for n >= 1; row 0 uses the forward stencil."""
    dU = np.empty_like(U)
    dU[1:] = (U[1:] - U[:-1]) / dt
    dU[0] = (U[1] - U[0]) / dt
    return dU


@dataclass
class Trajectory:
    mu: np.ndarray
    t: np.ndarray
    U: np.ndarray   # (N_t, N_u)
    dU: np.ndarray  # same shape

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        if self.U.shape != self.dU.shape:
            raise ArchiveError(f"U shape {self.U.shape} != dU shape {self.dU.shape}")
        if self.t.shape[0] != self.U.shape[0]:
            raise ArchiveError("time grid length does not match snapshot count")


@dataclass
class TrajectoryDataset:
    system: str
    dt: float
    trajectories: list
    provenance: dict = field(default_factory=dict)

    @property
    def n_state(self):
        return self.trajectories[0].U.shape[1]

    @property
    def mus(self):
        return np.array([tr.mu for tr in self.trajectories])

    def pair_count(self):
        return sum(tr.U.shape[0] - 1 for tr in self.trajectories)

    def pair_indices(self):
        """All (trajectory, step) indices of consecutive snapshot pairs."""
        out = []
        for ti, tr in enumerate(self.trajectories):
            out.extend((ti, n) for n in range(tr.U.shape[0] - 1))
        return out

    def _stacked(self):
        """Row-concatenated snapshot arrays, cached until trajectories change."""
        if getattr(self, "_cache_n", None) != len(self.trajectories):
            offsets = np.cumsum([0] + [tr.U.shape[0] for tr in self.trajectories])
            self._cache = {
                "U": np.concatenate([tr.U for tr in self.trajectories]),
                "dU": np.concatenate([tr.dU for tr in self.trajectories]),
                "mu": np.concatenate([np.broadcast_to(tr.mu, (tr.U.shape[0], tr.mu.size))
                                      for tr in self.trajectories]),
                "offsets": offsets,
                "pair_rows": np.concatenate([
                    offsets[ti] + np.arange(tr.U.shape[0] - 1)
                    for ti, tr in enumerate(self.trajectories)]),
            }
            self._cache_n = len(self.trajectories)
        return self._cache

    def pair_rows(self):
        """Global row index of the first element of every consecutive pair."""
        return self._stacked()["pair_rows"]

    def gather_rows(self, rows):
        """Batch from global row indices (each row starts a consecutive pair)."""
        c = self._stacked()
        return PairBatch(u=c["U"][rows], u_next=c["U"][rows + 1],
                         du=c["dU"][rows], mu=c["mu"][rows], dt=self.dt)

    def gather_pairs(self, pairs):
        """Stack a list of (trajectory, step) pairs into batch arrays."""
        offsets = self._stacked()["offsets"]
        rows = np.array([offsets[ti] + n for ti, n in pairs], dtype=int)
        return self.gather_rows(rows)

    # -- archive IO -----------------------------------------------------------

    def save(self, dirpath, with_derivatives=True):
        os.makedirs(dirpath, exist_ok=True)
        payloads = []
        for i, tr in enumerate(self.trajectories):
            u_name = f"traj_{i:03d}.u.bin"
            with open(os.path.join(dirpath, u_name), "wb") as f:
                f.write(tr.U.astype("<f8").tobytes())
            du_name = None
            if with_derivatives:
                du_name = f"traj_{i:03d}.du.bin"
                with open(os.path.join(dirpath, du_name), "wb") as f:
                    f.write(tr.dU.astype("<f8").tobytes())
            payloads.append({"u": u_name, "du": du_name})
        header = {
            "format": FORMAT_TAG,
            "system": self.system,
            "dt": self.dt,
            "endianness": "little",
            "mus": [tr.mu.tolist() for tr in self.trajectories],
            "shapes": [list(tr.U.shape) for tr in self.trajectories],
            "t_start": [float(tr.t[0]) for tr in self.trajectories],
            "payloads": payloads,
            "provenance": self.provenance,
        }
        with open(os.path.join(dirpath, "header.json"), "w") as f:
            json.dump(header, f, indent=2)
        return dirpath

    @classmethod
    def load(cls, path):
        """Load and validate an archive (directory or header.json path)."""
        header_path = path if str(path).endswith(".json") else os.path.join(path, "header.json")
        if not os.path.exists(header_path):
            raise ArchiveError(f"{path}: missing header.json")
        with open(header_path) as f:
            header = json.load(f)
        for key in ("format", "system", "dt", "mus", "shapes", "payloads"):
            if key not in header:
                raise ArchiveError(f"{header_path}: header is missing the '{key}' section")
        if header["format"] != FORMAT_TAG:
            raise ArchiveError(f"{header_path}: unknown format {header['format']!r}")
        if header.get("endianness", "little") != "little":
            raise ArchiveError(f"{header_path}: unsupported endianness")
        base = os.path.dirname(header_path)
        dt = float(header["dt"])
        trajectories = []
        n = len(header["mus"])
        if not (len(header["shapes"]) == len(header["payloads"]) == n):
            raise ArchiveError(f"{header_path}: mus/shapes/payloads lengths disagree")
        for i in range(n):
            shape = tuple(header["shapes"][i])
            entry = header["payloads"][i]
            U = _read_payload(os.path.join(base, entry["u"]), shape)
            if entry.get("du"):
                dU = _read_payload(os.path.join(base, entry["du"]), shape)
            else:
                dU = backward_difference(U, dt)
            t0 = header.get("t_start", [0.0] * n)[i]
            t = t0 + dt * np.arange(shape[0])
            trajectories.append(Trajectory(np.array(header["mus"][i]), t, U, dU))
        return cls(header["system"], dt, trajectories, header.get("provenance", {}))

    def to_csv(self, dirpath):
        """Plain-text export for small cases: one CSV per trajectory."""
        os.makedirs(dirpath, exist_ok=True)
        for i, tr in enumerate(self.trajectories):
            cols = np.column_stack([tr.t, tr.U])
            head = "t," + ",".join(f"u{j}" for j in range(tr.U.shape[1]))
            np.savetxt(os.path.join(dirpath, f"traj_{i:03d}.csv"), cols,
                       delimiter=",", header=head, comments="")


def _read_payload(path, shape):
    if not os.path.exists(path):
        raise ArchiveError(f"missing payload file {path}")
    raw = np.fromfile(path, dtype="<f8")
    expected = shape[0] * shape[1]
    if raw.size != expected:
        raise ArchiveError(
            f"{path}: payload holds {raw.size} values, header shape {shape} needs {expected}")
    arr = raw.astype(float).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ArchiveError(f"{path}: payload contains non-finite entries")
    return arr


@dataclass
class PairBatch:
    """A batch of consecutive snapshot pairs with their derivative data."""
    u: np.ndarray       # (B, N_u)
    u_next: np.ndarray  # (B, N_u)
    du: np.ndarray      # (B, N_u)
    mu: np.ndarray      # (B, mu_dim)
    dt: float

    @property
    def size(self):
        return self.u.shape[0]
