"""Binary file formats: datasets, model/theta files, sample stores, volumes, MRC.

All formats are little-endian with fixed layouts, so identical runs produce
byte-identical files.  Images are stored as real-space float32 pixels and
transformed to Fourier samples at load time.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, InvariantError
from .forward import NoiseModel

DATASET_MAGIC = b"HVOL"
MODEL_MAGIC = b"HVTH"
STORE_MAGIC = b"HVSS"
STORE_FOOTER_MAGIC = b"HVSF"
STORE_RECORD_MARK = 0xA55A5AA5
VOLUME_MAGIC = b"HVVO"
FLAG_SYNTHETIC = 1


@dataclass
class Dataset:
    """In-memory view of a particle dataset."""

    grid_size: int
    pixel_size: float
    k_max: int
    oversample: int
    state_dims: int
    noise: NoiseModel
    synthetic: bool
    ids: np.ndarray
    ctf_rows: np.ndarray
    pixels: np.ndarray
    true_quats: np.ndarray | None = None
    true_taus: np.ndarray | None = None
    true_shifts: np.ndarray | None = None
    true_amps: np.ndarray | None = None

    @property
    def n_particles(self) -> int:
        return self.pixels.shape[0]


def write_dataset(path, dataset: Dataset) -> None:
    n = dataset.grid_size
    count = dataset.n_particles
    flags = FLAG_SYNTHETIC if dataset.synthetic else 0
    sig = dataset.noise.sigma_per_shell
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIdQII", 1, n, dataset.pixel_size, count, flags,
                             dataset.state_dims))
        fh.write(struct.pack("<II", dataset.k_max, dataset.oversample))
        fh.write(struct.pack("<I", sig.size))
        fh.write(sig.astype("<f8").tobytes())
        for i in range(count):
            fh.write(struct.pack("<Q", int(dataset.ids[i])))
            fh.write(dataset.ctf_rows[i].astype("<f8").tobytes())
            if dataset.synthetic:
                fh.write(dataset.true_quats[i].astype("<f8").tobytes())
                fh.write(dataset.true_taus[i].astype("<f8").tobytes())
                fh.write(dataset.true_shifts[i].astype("<f8").tobytes())
                fh.write(struct.pack("<d", float(dataset.true_amps[i])))
            fh.write(np.ascontiguousarray(dataset.pixels[i], dtype="<f4").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DATASET_MAGIC:
        raise DomainError(f"{path}: not a dataset file")
    off = 4
    version, n, pixel_size, count, flags, state_dims = struct.unpack_from("<IIdQII", raw, off)
    off += struct.calcsize("<IIdQII")
    if version != 1:
        raise DomainError(f"unsupported dataset version {version}")
    k_max, oversample = struct.unpack_from("<II", raw, off)
    off += 8
    (n_shells_,) = struct.unpack_from("<I", raw, off)
    off += 4
    sigma = np.frombuffer(raw, dtype="<f8", count=n_shells_, offset=off).copy()
    off += 8 * n_shells_
    synthetic = bool(flags & FLAG_SYNTHETIC)

    ids = np.empty(count, dtype=np.int64)
    ctf_rows = np.empty((count, 5))
    pixels = np.empty((count, n, n), dtype=np.float32)
    quats = np.empty((count, 4)) if synthetic else None
    taus = np.empty((count, state_dims)) if synthetic else None
    shifts = np.empty((count, 2)) if synthetic else None
    amps = np.empty(count) if synthetic else None
    for i in range(count):
        (ids[i],) = struct.unpack_from("<Q", raw, off)
        off += 8
        ctf_rows[i] = np.frombuffer(raw, dtype="<f8", count=5, offset=off)
        off += 40
        if synthetic:
            quats[i] = np.frombuffer(raw, dtype="<f8", count=4, offset=off)
            off += 32
            taus[i] = np.frombuffer(raw, dtype="<f8", count=state_dims, offset=off)
            off += 8 * state_dims
            shifts[i] = np.frombuffer(raw, dtype="<f8", count=2, offset=off)
            off += 16
            (amps[i],) = struct.unpack_from("<d", raw, off)
            off += 8
        pixels[i] = np.frombuffer(raw, dtype="<f4", count=n * n, offset=off).reshape(n, n)
        off += 4 * n * n
    if off != len(raw):
        raise InvariantError(f"{path}: {len(raw) - off} trailing bytes")
    return Dataset(grid_size=n, pixel_size=pixel_size, k_max=k_max, oversample=oversample,
                   state_dims=state_dims, noise=NoiseModel(sigma), synthetic=synthetic,
                   ids=ids, ctf_rows=ctf_rows, pixels=pixels, true_quats=quats,
                   true_taus=taus, true_shifts=shifts, true_amps=amps)


# ---------------------------------------------------------------------------
# Model / theta files
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<H", len(b)) + b


def _unpack_str(raw, off):
    (ln,) = struct.unpack_from("<H", raw, off)
    off += 2
    return raw[off:off + ln].decode(), off + ln


def save_model_file(path, model, theta: dict) -> None:
    """Persist a model's structure and coefficients (truth sidecars, exports)."""
    from .model import CompositeHyperModel, PlainHyperModel

    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<IdII", model.grid_size, model.pixel_size, model.k_max,
                             model.oversample))
        if isinstance(model, PlainHyperModel):
            fh.write(struct.pack("<B", 0))
            fh.write(struct.pack("<II", model.state_basis.dims, model.state_basis.max_degree))
        elif isinstance(model, CompositeHyperModel):
            fh.write(struct.pack("<B", 1))
            comps = model.spec.components
            fh.write(struct.pack("<I", len(comps)))
            for comp in comps:
                fh.write(comp.support_center.astype("<f8").tobytes())
                fh.write(struct.pack("<dIIiIIB", comp.support_radius, comp.state_dims,
                                     comp.max_degree,
                                     -1 if comp.share_group is None else comp.share_group,
                                     comp.grid_size, comp.band_limit,
                                     int(comp.trajectory.learnable)))
                fh.write(comp.trajectory.as_row().astype("<f8").tobytes())
        else:
            raise DomainError("unknown model kind")
        pool_names = [k for k in theta if not k.startswith("__")]
        fh.write(struct.pack("<I", len(pool_names)))
        for name in sorted(pool_names):
            fh.write(_pack_str(name))
            arr = theta[name]
            fh.write(struct.pack("<IIII", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<c16").tobytes())
        if "__traj__" in theta:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<I", theta["__traj__"].shape[0]))
            fh.write(np.ascontiguousarray(theta["__traj__"], dtype="<f8").tobytes())
        else:
            fh.write(struct.pack("<B", 0))


def load_model_file(path):
    """Inverse of save_model_file; returns (model, theta)."""
    from .basis import StateBasis, VolumeBasis
    from .model import (AffineTrajectory, ComponentSpec, CompositeHyperModel,
                        CompositeSpec, PlainHyperModel)

    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise DomainError(f"{path}: not a model file")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    n, pixel_size, k_max, oversample = struct.unpack_from("<IdII", raw, off)
    off += struct.calcsize("<IdII")
    (kind,) = struct.unpack_from("<B", raw, off)
    off += 1
    grid = VolumeBasis(n, pixel_size, k_max, oversample)
    if kind == 0:
        dims, max_degree = struct.unpack_from("<II", raw, off)
        off += 8
        model = PlainHyperModel(grid, StateBasis(dims=dims, max_degree=max_degree))
    else:
        (n_comp,) = struct.unpack_from("<I", raw, off)
        off += 4
        comps = []
        for _ in range(n_comp):
            center = np.frombuffer(raw, dtype="<f8", count=3, offset=off).copy()
            off += 24
            radius, dims, max_degree, share, gsize, band, learn = struct.unpack_from(
                "<dIIiIIB", raw, off)
            off += struct.calcsize("<dIIiIIB")
            row = np.frombuffer(raw, dtype="<f8", count=6, offset=off).copy()
            off += 48
            comps.append(ComponentSpec(
                support_center=center, support_radius=radius, state_dims=dims,
                max_degree=max_degree,
                share_group=None if share < 0 else share,
                grid_size=gsize, band_limit=band,
                trajectory=AffineTrajectory(offset=row[:3], direction=row[3:],
                                            learnable=bool(learn))))
        model = CompositeHyperModel(CompositeSpec(components=comps, grid=grid))
    (n_pools,) = struct.unpack_from("<I", raw, off)
    off += 4
    theta = {}
    for _ in range(n_pools):
        name, off = _unpack_str(raw, off)
        shape = struct.unpack_from("<IIII", raw, off)
        off += 16
        cnt = int(np.prod(shape))
        theta[name] = np.frombuffer(raw, dtype="<c16", count=cnt, offset=off).reshape(shape).copy()
        off += 16 * cnt
    (has_traj,) = struct.unpack_from("<B", raw, off)
    off += 1
    if has_traj:
        (n_comp,) = struct.unpack_from("<I", raw, off)
        off += 4
        theta["__traj__"] = np.frombuffer(raw, dtype="<f8", count=6 * n_comp,
                                          offset=off).reshape(n_comp, 6).copy()
    return model, theta


# ---------------------------------------------------------------------------
# Sample store
# ---------------------------------------------------------------------------


def snapshot_from_chain(chain) -> dict:
    return {
        "iteration": int(chain.iteration),
        "theta": {k: v.copy() for k, v in chain.theta.items()},
        "quats": chain.quats.copy(),
        "taus": chain.taus.copy(),
        "shifts": chain.shifts.copy(),
        "amps": chain.amps.copy(),
        "loglik": chain.stats["loglik"].copy(),
        "stats": {
            "log_posterior": chain.stats.get("log_posterior", 0.0),
            "accept_rates": chain.stats.get("accept_rates", {}),
            "scales": chain.stats.get("scales", {}),
            "digest": chain.stats.get("digest", ""),
            "k_active": chain.k_active,
            "q_active": chain.q_active,
            "seed": int(chain.seed),
        },
    }


def _encode_snapshot(snap: dict) -> bytes:
    parts = [struct.pack("<Q", snap["iteration"])]
    pools = [k for k in snap["theta"] if not k.startswith("__")]
    parts.append(struct.pack("<H", len(pools)))
    for name in sorted(pools):
        arr = snap["theta"][name]
        parts.append(_pack_str(name))
        parts.append(struct.pack("<IIII", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<c16").tobytes())
    if "__traj__" in snap["theta"]:
        tr = snap["theta"]["__traj__"]
        parts.append(struct.pack("<BI", 1, tr.shape[0]))
        parts.append(np.ascontiguousarray(tr, dtype="<f8").tobytes())
    else:
        parts.append(struct.pack("<BI", 0, 0))
    n = snap["quats"].shape[0]
    d = snap["taus"].shape[1]
    parts.append(struct.pack("<QI", n, d))
    for key in ("quats", "taus", "shifts", "amps", "loglik"):
        parts.append(np.ascontiguousarray(snap[key], dtype="<f8").tobytes())
    stats = json.dumps(snap["stats"], sort_keys=True).encode()
    parts.append(struct.pack("<I", len(stats)))
    parts.append(stats)
    return b"".join(parts)


def _decode_snapshot(payload: bytes) -> dict:
    off = 0
    (iteration,) = struct.unpack_from("<Q", payload, off)
    off += 8
    (n_pools,) = struct.unpack_from("<H", payload, off)
    off += 2
    theta = {}
    for _ in range(n_pools):
        name, off = _unpack_str(payload, off)
        shape = struct.unpack_from("<IIII", payload, off)
        off += 16
        cnt = int(np.prod(shape))
        theta[name] = np.frombuffer(payload, dtype="<c16", count=cnt,
                                    offset=off).reshape(shape).copy()
        off += 16 * cnt
    has_traj, n_comp = struct.unpack_from("<BI", payload, off)
    off += 5
    if has_traj:
        theta["__traj__"] = np.frombuffer(payload, dtype="<f8", count=6 * n_comp,
                                          offset=off).reshape(n_comp, 6).copy()
        off += 48 * n_comp
    n, d = struct.unpack_from("<QI", payload, off)
    off += 12
    out = {"iteration": iteration, "theta": theta}
    for key, cols in (("quats", 4), ("taus", d), ("shifts", 2), ("amps", None),
                      ("loglik", None)):
        cnt = n if cols is None else n * cols
        arr = np.frombuffer(payload, dtype="<f8", count=cnt, offset=off).copy()
        off += 8 * cnt
        out[key] = arr if cols is None else arr.reshape(n, cols)
    (stats_len,) = struct.unpack_from("<I", payload, off)
    off += 4
    out["stats"] = json.loads(payload[off:off + stats_len].decode())
    return out


class SampleStore:
    """Append-only snapshot log with a rebuildable index footer.

    Records are length-prefixed and CRC-guarded, so a reader can always scan
    a mid-run or crashed file and lose at most the final partial record.
    """

    def __init__(self, path, mode: str = "a"):
        self.path = Path(path)
        self._fh = None
        if mode == "w" or not self.path.exists():
            self._fh = open(self.path, "wb")
            self._fh.write(STORE_MAGIC + struct.pack("<I", 1))
            self._fh.flush()
        elif mode == "a":
            records = self.scan_offsets(self.path)
            end = records[-1][1] if records else 8
            with open(self.path, "rb+") as fh:
                fh.truncate(end)
            self._fh = open(self.path, "ab")

    def append(self, chain) -> None:
        snap = snapshot_from_chain(chain) if not isinstance(chain, dict) else chain
        payload = _encode_snapshot(snap)
        rec = struct.pack("<IQ", STORE_RECORD_MARK, len(payload)) + payload
        rec += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
        self._fh.write(rec)
        self._fh.flush()

    def close(self) -> None:
        if self._fh is None:
            return
        offsets = [off for off, _ in self.scan_offsets(self.path)]
        footer = struct.pack("<Q", len(offsets))
        footer += b"".join(struct.pack("<Q", o) for o in offsets)
        start = self._fh.tell()
        self._fh.write(STORE_FOOTER_MAGIC + footer + struct.pack("<Q", start)
                       + STORE_FOOTER_MAGIC)
        self._fh.close()
        self._fh = None

    @staticmethod
    def scan_offsets(path) -> list[tuple[int, int]]:
        """(start, end) byte ranges of every complete record."""
        raw = Path(path).read_bytes()
        if raw[:4] != STORE_MAGIC:
            raise DomainError(f"{path}: not a sample store")
        out = []
        off = 8
        while off + 12 <= len(raw):
            mark, ln = struct.unpack_from("<IQ", raw, off)
            if mark != STORE_RECORD_MARK or off + 12 + ln + 4 > len(raw):
                break
            payload = raw[off + 12:off + 12 + ln]
            (crc,) = struct.unpack_from("<I", raw, off + 12 + ln)
            if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
                break
            out.append((off, off + 12 + ln + 4))
            off += 12 + ln + 4
        return out

    @staticmethod
    def read_all(path) -> list[dict]:
        raw = Path(path).read_bytes()
        snaps = []
        for start, end in SampleStore.scan_offsets(path):
            payload = raw[start + 12:end - 4]
            snaps.append(_decode_snapshot(payload))
        return snaps


# ---------------------------------------------------------------------------
# Volume files
# ---------------------------------------------------------------------------


def write_volume(path, volume: np.ndarray, pixel_size: float) -> None:
    n = volume.shape[0]
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<IId", 1, n, pixel_size))
        fh.write(np.ascontiguousarray(volume, dtype="<f4").tobytes())


def read_volume(path):
    raw = Path(path).read_bytes()
    if raw[:4] != VOLUME_MAGIC:
        raise DomainError(f"{path}: not a volume file")
    version, n, pixel_size = struct.unpack_from("<IId", raw, 4)
    data = np.frombuffer(raw, dtype="<f4", count=n ** 3,
                         offset=4 + struct.calcsize("<IId")).reshape(n, n, n).copy()
    return data, pixel_size


def write_mrc(path, volume: np.ndarray, pixel_size: float, label: str = "hypervol") -> None:
    """MRC2014 mode-2 volume: little-endian, 1024-byte header, float32 data."""
    n = volume.shape[0]
    if volume.shape != (n, n, n):
        raise DomainError("MRC export expects a cubic volume")
    data = np.ascontiguousarray(np.transpose(volume, (2, 1, 0)), dtype="<f4")
    dmin, dmax = float(volume.min()), float(volume.max())
    dmean, rms = float(volume.mean()), float(volume.std())
    header = bytearray(1024)
    struct.pack_into("<3i", header, 0, n, n, n)            # nx ny nz
    struct.pack_into("<i", header, 12, 2)                  # mode 2: float32
    struct.pack_into("<3i", header, 16, 0, 0, 0)           # nxstart..
    struct.pack_into("<3i", header, 28, n, n, n)           # mx my mz
    cell = n * pixel_size
    struct.pack_into("<3f", header, 40, cell, cell, cell)  # cella
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)  # cellb
    struct.pack_into("<3i", header, 64, 1, 2, 3)           # mapc mapr maps
    struct.pack_into("<3f", header, 76, dmin, dmax, dmean)
    struct.pack_into("<i", header, 88, 1)                  # ispg: volume
    struct.pack_into("<i", header, 92, 0)                  # nsymbt
    header[104:108] = b"    "                              # exttyp (none)
    struct.pack_into("<i", header, 108, 20140)             # nversion
    struct.pack_into("<3f", header, 196, 0.0, 0.0, 0.0)    # origin
    header[208:212] = b"MAP "
    header[212:216] = bytes([0x44, 0x44, 0x00, 0x00])      # little-endian stamp
    struct.pack_into("<f", header, 216, rms)
    struct.pack_into("<i", header, 220, 1)                 # nlabl
    header[224:304] = label.encode().ljust(80)[:80]
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(data.tobytes())
