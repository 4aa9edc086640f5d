"""Hyper-volume model contract: plain tensor-product and composite variants.

A model owns one or more coefficient *pools* (Hermitian tensors over a
VolumeBasis x StateBasis pair) plus optional per-component affine
trajectories, and exposes slice prediction, its adjoint, and priors behind a
uniform interface so samplers never see the model internals.

theta is a plain dict: one entry per pool name holding the coefficient cube,
plus "__traj__" -> (n_components, 6) rows of (offset, direction) for
composite models.  Gradients mirror that structure in the folded Hermitian
convention of basis.fold_hermitian_gradient.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from . import basis
from .basis import (
    CoefficientPacking,
    HyperCoefficients,
    SliceCache,
    StateBasis,
    VolumeBasis,
    eval_state_basis,
    eval_state_basis_batch,
)
from .errors import DomainError, InvariantError
from .geometry import check_unit_quat, quat_to_matrix


@dataclass
class PriorSpec:
    """Quadratic coefficient prior plus an optional adjacent-state penalty.

    log_prior(theta) = -sum_{k,q} w(k) w(q) |a_{k,q}|^2
                       - lambda * sum_t sum_k |A(k, t) - A(k, t+1)|^2

    spatial_weights indexes integer radial shells, state_weights per-function
    degrees; missing vectors default to zero spatial weight (no prior) and
    unit state weight.  The adjacent term samples a fixed odd grid of states.
    """

    spatial_weights: np.ndarray | None = None
    state_weights: np.ndarray | None = None
    adjacent_state_penalty: float = 0.0
    n_adjacent_samples: int = 17

    @classmethod
    def shell_quadratic(cls, k_max: int, q_max: int, base: float,
                        state_growth: float = 1.0, **kw) -> "PriorSpec":
        shells = np.arange(k_max + 2, dtype=np.float64)
        wk = base * (shells / max(k_max, 1)) ** 2
        wq = (1.0 + state_growth * np.arange(q_max + 1, dtype=np.float64) ** 2)
        return cls(spatial_weights=wk, state_weights=wq, **kw)

    def weight_tensor(self, vb: VolumeBasis, sb: StateBasis) -> np.ndarray:
        k = vb.band_limit_shell
        shells = np.rint(basis.shell_radii(k)).astype(np.int64)
        if self.spatial_weights is None:
            wk = np.zeros(shells.max() + 1)
        else:
            wk = np.asarray(self.spatial_weights, dtype=np.float64)
            if np.any(wk < 0):
                raise DomainError("spatial weights must be nonnegative")
        if self.state_weights is None:
            wq = np.ones(sb.max_degree + 1)
        else:
            wq = np.asarray(self.state_weights, dtype=np.float64)
            if np.any(wq < 0):
                raise DomainError("state weights must be nonnegative")
        wk_grid = wk[np.minimum(shells, wk.size - 1)]
        wq_f = wq[np.minimum(sb.function_degrees, wq.size - 1)]
        return wk_grid[..., None] * wq_f[None, None, None, :]

    def adjacent_matrix(self, sb: StateBasis) -> np.ndarray:
        """Quadratic form (n_q, n_q) of the discrete adjacent-state penalty."""
        nq = sb.n_functions
        if self.adjacent_state_penalty == 0.0 or sb.dims == 0:
            return np.zeros((nq, nq))
        t = np.linspace(-1.0, 1.0, self.n_adjacent_samples)
        grids = np.meshgrid(*([t] * sb.dims), indexing="ij")
        taus = np.stack([g.ravel() for g in grids], axis=1)
        p = eval_state_basis_batch(sb, taus)  # (T^d, n_q)
        shape = (self.n_adjacent_samples,) * sb.dims + (nq,)
        p_grid = p.reshape(shape)
        m = np.zeros((nq, nq))
        for axis in range(sb.dims):
            diff = np.diff(p_grid, axis=axis).reshape(-1, nq)
            m += diff.T @ diff
        return m


def occupancy_histogram(taus: np.ndarray, bins: int = 32):
    """Fixed-bin state occupancy over [-1,1]^d for d <= 2."""
    taus = np.atleast_2d(np.asarray(taus, dtype=np.float64))
    d = taus.shape[1]
    if d < 1 or d > 2:
        raise DomainError("occupancy histogram supports 1 or 2 state dimensions")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    if d == 1:
        counts, _ = np.histogram(taus[:, 0], bins=edges)
    else:
        counts, _, _ = np.histogram2d(taus[:, 0], taus[:, 1], bins=(edges, edges))
    counts = counts.astype(np.int64)
    return {"counts": counts, "frequencies": counts / max(taus.shape[0], 1),
            "edges": edges}


@dataclass
class AffineTrajectory:
    """State-dependent rigid displacement: offset + tau_1 * direction."""

    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.zeros(3))
    learnable: bool = False

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.offset, self.direction])


@dataclass
class ComponentSpec:
    """One composite component: support ball, state space, trajectory, sharing."""

    support_center: np.ndarray
    support_radius: float
    state_dims: int
    max_degree: int
    trajectory: AffineTrajectory = field(default_factory=AffineTrajectory)
    share_group: int | None = None
    grid_size: int | None = None
    band_limit: int | None = None

    def __post_init__(self):
        self.support_center = np.asarray(self.support_center, dtype=np.float64).reshape(3)
        if not (self.support_radius > 0):
            raise DomainError("support_radius must be positive")
        if self.state_dims < 0 or self.max_degree < 0:
            raise DomainError("state_dims and max_degree must be nonnegative")


@dataclass
class CompositeSpec:
    """A sum of supported components, possibly sharing coefficient pools."""

    components: list[ComponentSpec]
    grid: VolumeBasis

    def __post_init__(self):
        n = self.grid.grid_size
        half = n / 2.0
        for i, comp in enumerate(self.components):
            if np.max(np.abs(comp.support_center)) + comp.support_radius > half + 1e-9:
                raise DomainError(f"component {i} support ball leaves the grid")
            reach = (np.linalg.norm(comp.trajectory.offset)
                     + np.linalg.norm(comp.trajectory.direction))
            if reach > comp.support_radius + 1e-9:
                raise DomainError(f"component {i} trajectory leaves its support ball")
            if comp.grid_size is None:
                comp.grid_size = int(2 * np.ceil(comp.support_radius)) + 2
                comp.grid_size += comp.grid_size % 2
            if comp.band_limit is None:
                want = int(np.ceil(comp.grid_size * self.grid.band_limit_shell / n)) + 1
                comp.band_limit = min(comp.grid_size // 2 - 1, max(want, 2))
        groups: dict[int, ComponentSpec] = {}
        for comp in self.components:
            if comp.share_group is None:
                continue
            ref = groups.setdefault(comp.share_group, comp)
            same = (ref.state_dims == comp.state_dims and ref.max_degree == comp.max_degree
                    and ref.grid_size == comp.grid_size and ref.band_limit == comp.band_limit)
            if not same:
                raise DomainError(
                    f"share group {comp.share_group} mixes unequal basis dimensions")

    def pool_name(self, index: int) -> str:
        comp = self.components[index]
        if comp.share_group is not None:
            return f"share{comp.share_group}"
        return f"comp{index}"


class HyperModel(ABC):
    """Contract every concrete hyper-volume model satisfies.

    Pools map names to (VolumeBasis, StateBasis); slice prediction is linear
    in the pool coefficients, and gradients use the folded Hermitian
    convention throughout.
    """

    grid_size: int
    pixel_size: float
    k_max: int
    oversample: int

    @abstractmethod
    def pool_bases(self) -> dict[str, tuple[VolumeBasis, StateBasis]]: ...

    @abstractmethod
    def state_dim(self) -> int: ...

    @abstractmethod
    def build_cache(self, theta: dict, q_cap: int | None = None) -> dict: ...

    @abstractmethod
    def slice_batch(self, cache: dict, quats: np.ndarray, taus: np.ndarray,
                    points: np.ndarray, return_parts: bool = False): ...

    @abstractmethod
    def new_accumulator(self, q_cap: int | None = None) -> dict: ...

    @abstractmethod
    def accumulate_gradient(self, acc: dict, cache: dict, quats: np.ndarray,
                            taus: np.ndarray, points: np.ndarray, v: np.ndarray,
                            parts=None) -> None: ...

    @abstractmethod
    def finish_gradient(self, acc: dict, k_cap: int | None = None,
                        q_cap: int | None = None) -> dict: ...

    @abstractmethod
    def synthesize(self, theta: dict, tau: np.ndarray) -> np.ndarray: ...

    def zero_theta(self) -> dict:
        theta = {}
        for name, (vb, sb) in self.pool_bases().items():
            c = vb.cube_size
            theta[name] = np.zeros((c, c, c, sb.n_functions), dtype=np.complex128)
        return theta

    def copy_theta(self, theta: dict) -> dict:
        out = {}
        for key, val in theta.items():
            out[key] = val.copy()
        return out

    def active_masks(self, k_cap: int | None = None, q_cap: int | None = None) -> dict:
        masks = {}
        for name, (vb, sb) in self.pool_bases().items():
            cap = None if k_cap is None else _scale_cap(k_cap, self.k_max, vb)
            masks[name] = basis.make_active_mask(vb, sb, cap, q_cap)
        return masks

    def packing(self, k_cap: int | None = None, q_cap: int | None = None) -> "ModelPacking":
        return ModelPacking(self, k_cap, q_cap)

    def log_prior(self, theta: dict) -> float:
        total = 0.0
        for name, (vb, sb) in self.pool_bases().items():
            spec = self.prior_for(name)
            a = theta[name]
            w = spec.weight_tensor(vb, sb)
            total -= float(np.sum(w * np.abs(a) ** 2))
            if spec.adjacent_state_penalty != 0.0 and sb.dims > 0:
                m = spec.adjacent_matrix(sb)
                ma = a @ m
                total -= spec.adjacent_state_penalty * float(np.real(np.sum(np.conj(a) * ma)))
        return total

    def grad_log_prior(self, theta: dict) -> dict:
        grads = {}
        for name, (vb, sb) in self.pool_bases().items():
            spec = self.prior_for(name)
            a = theta[name]
            t = -2.0 * spec.weight_tensor(vb, sb) * np.conj(a)
            if spec.adjacent_state_penalty != 0.0 and sb.dims > 0:
                m = spec.adjacent_matrix(sb)
                t = t - 2.0 * spec.adjacent_state_penalty * np.conj(a @ m)
            grads[name] = basis.fold_hermitian_gradient(t)
        if "__traj__" in theta:
            grads["__traj__"] = np.zeros_like(theta["__traj__"])
        return grads

    @abstractmethod
    def prior_for(self, pool: str) -> PriorSpec: ...

    def predict_slice(self, theta: dict, rotation: np.ndarray, tau: np.ndarray,
                      pose=None, ctf=None) -> np.ndarray:
        """Full-plane noiseless prediction; pose folds in CTF/shift/contrast."""
        rotation = check_unit_quat(rotation)
        tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
        if tau.shape != (self.state_dim(),):
            raise DomainError(f"tau must have {self.state_dim()} entries")
        geom = basis.plane_geometry(self.grid_size, self.pixel_size, self.k_max)
        cache = self.build_cache(theta)
        vals = self.slice_batch(cache, rotation[None], tau[None], geom.points_unique)[0]
        plane = geom.assemble_plane(vals)
        if pose is not None:
            from .forward import ctf_eval_radial, pose_plane_factors

            pose.validate_shift(self.grid_size)  # loose sanity bound
            n = self.grid_size
            jj = np.arange(n) - n // 2
            j1, j2 = np.meshgrid(jj, jj, indexing="ij")
            k_phys = np.hypot(j1, j2) / (n * self.pixel_size)
            cvals = ctf_eval_radial(ctf, k_phys)
            phase = np.exp(-2j * np.pi * (j1 * pose.shift[0] + j2 * pose.shift[1]) / n)
            plane = pose.contrast * cvals * phase * plane
        return plane

    def grad_predict_adjoint(self, residual_plane: np.ndarray, rotation: np.ndarray,
                             tau: np.ndarray) -> dict:
        """Exact adjoint of the theta-linearization of predict_slice."""
        geom = basis.plane_geometry(self.grid_size, self.pixel_size, self.k_max)
        y = geom.take_full(np.asarray(residual_plane, dtype=np.complex128))
        acc = self.new_accumulator()
        self._accumulate_adjoint(acc, np.atleast_2d(rotation),
                                 np.atleast_2d(np.asarray(tau, dtype=np.float64)),
                                 geom.points_full, y[None])
        out = {}
        for name, (vb, sb) in self.pool_bases().items():
            cube = basis.adjoint_from_scatter(self._acc_pool(acc, name), vb)
            full = np.zeros(self._pool_shape(name), dtype=np.complex128)
            full[..., self._kept_q(name, None)] = cube
            out[name] = full
        return out

    # Internal helpers shared by the concrete models.
    def _pool_shape(self, name):
        vb, sb = self.pool_bases()[name]
        c = vb.cube_size
        return (c, c, c, sb.n_functions)

    def _kept_q(self, name, q_cap):
        _, sb = self.pool_bases()[name]
        if q_cap is None:
            return np.arange(sb.n_functions)
        keep = sb.function_degrees <= q_cap
        keep[0] = True
        return np.flatnonzero(keep)

    @abstractmethod
    def _accumulate_adjoint(self, acc, quats, taus, points, y) -> None: ...

    @abstractmethod
    def _acc_pool(self, acc: dict, name: str) -> np.ndarray: ...


def _scale_cap(k_cap: int, k_max_lab: int, vb: VolumeBasis) -> int:
    """Translate a lab-frame shell cap onto a pool's own frequency lattice."""
    if k_max_lab <= 0:
        return vb.band_limit_shell
    frac = k_cap / k_max_lab
    return max(2, int(np.ceil(frac * vb.band_limit_shell)))


class ModelPacking:
    """Flat real-vector view of theta restricted to an active-mask stage."""

    def __init__(self, model: HyperModel, k_cap: int | None, q_cap: int | None):
        self.model = model
        self.pools = list(model.pool_bases().keys())
        masks = model.active_masks(k_cap, q_cap)
        self.packings = {name: CoefficientPacking(masks[name]) for name in self.pools}
        self.traj_rows = model.learnable_components() if hasattr(model, "learnable_components") else []
        self.n_free = sum(p.n_free for p in self.packings.values()) + 6 * len(self.traj_rows)

    def pack(self, theta: dict) -> np.ndarray:
        parts = [self.packings[name].pack(theta[name]) for name in self.pools]
        for row in self.traj_rows:
            parts.append(theta["__traj__"][row])
        return np.concatenate(parts) if parts else np.zeros(0)

    def pack_real_pairs(self, fields: dict) -> np.ndarray:
        """Pack a real-valued per-entry field (e.g. curvature) onto both halves."""
        parts = []
        for name in self.pools:
            p = self.packings[name]
            flat = fields[name].reshape(-1).real
            parts.append(np.concatenate([flat[p._idx_re], flat[p._idx_im]]))
        for row in self.traj_rows:
            parts.append(fields["__traj__"][row])
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, vec: np.ndarray, base_theta: dict | None = None) -> dict:
        theta = {}
        off = 0
        for name in self.pools:
            p = self.packings[name]
            theta[name] = p.unpack(vec[off:off + p.n_free])
            off += p.n_free
        if base_theta is not None and "__traj__" in base_theta:
            theta["__traj__"] = base_theta["__traj__"].copy()
        elif hasattr(self.model, "static_traj_rows"):
            theta["__traj__"] = self.model.static_traj_rows()
        for row in self.traj_rows:
            theta["__traj__"][row] = vec[off:off + 6]
            off += 6
        return theta


class PlainHyperModel(HyperModel):
    """Single full-grid tensor-product hyper-volume."""

    def __init__(self, vol_basis: VolumeBasis, state_basis: StateBasis,
                 prior: PriorSpec | None = None):
        self.vol_basis = vol_basis
        self.state_basis = state_basis
        self.prior = prior if prior is not None else PriorSpec()
        self.grid_size = vol_basis.grid_size
        self.pixel_size = vol_basis.pixel_size
        self.k_max = vol_basis.band_limit_shell
        self.oversample = vol_basis.oversample

    def pool_bases(self):
        return {"main": (self.vol_basis, self.state_basis)}

    def state_dim(self) -> int:
        return self.state_basis.dims

    def prior_for(self, pool: str) -> PriorSpec:
        return self.prior

    def learnable_components(self):
        return []

    def build_cache(self, theta: dict, q_cap: int | None = None) -> dict:
        co = HyperCoefficients(theta["main"], self.vol_basis, self.state_basis,
                               basis.make_active_mask(self.vol_basis, self.state_basis))
        q_keep = self._kept_q("main", q_cap)
        return {"main": basis.build_slice_cache(co, q_keep=q_keep), "q_keep": q_keep}

    def slice_batch(self, cache, quats, taus, points, return_parts=False):
        p = eval_state_basis_batch(self.state_basis, taus)[:, cache["q_keep"]]
        g = basis.gather_planes(cache["main"], quats, points)
        vals = np.einsum("bpq,bq->bp", g, p, optimize=True)
        if return_parts:
            return vals, {"gathered": g, "p": p}
        return vals

    def slice_from_parts(self, cache, parts, quats, taus, points):
        """Re-contract stored gathers at new states (rotation unchanged)."""
        p = eval_state_basis_batch(self.state_basis, taus)[:, cache["q_keep"]]
        return np.einsum("bpq,bq->bp", parts["gathered"], p, optimize=True)

    def new_accumulator(self, q_cap: int | None = None) -> dict:
        q_keep = self._kept_q("main", q_cap)
        m3 = self.vol_basis.padded_size ** 3
        return {"main": np.zeros((q_keep.size, m3), dtype=np.complex128),
                "q_keep": q_keep}

    def accumulate_gradient(self, acc, cache, quats, taus, points, v, parts=None):
        p = eval_state_basis_batch(self.state_basis, taus)[:, acc["q_keep"]]
        vals = np.conj(v)[:, :, None] * p[:, None, :]
        basis.scatter_accumulate(self.vol_basis.padded_size, quats, points, vals,
                                 acc["main"])

    def _accumulate_adjoint(self, acc, quats, taus, points, y):
        p = eval_state_basis_batch(self.state_basis, taus)[:, acc["q_keep"]]
        vals = y[:, :, None] * p[:, None, :]
        basis.scatter_accumulate(self.vol_basis.padded_size, quats, points, vals,
                                 acc["main"])

    def _acc_pool(self, acc, name):
        return acc["main"]

    def accumulate_curvature(self, acc, quats, taus, points, w2):
        p = eval_state_basis_batch(self.state_basis, taus)[:, acc["q_keep"]]
        vals = (w2[:, :, None] * p[:, None, :] ** 2).astype(np.complex128)
        basis.scatter_accumulate_squared(self.vol_basis.padded_size, quats, points,
                                         vals, acc["main"])

    def finish_gradient(self, acc, k_cap=None, q_cap=None):
        t = np.conj(basis.adjoint_from_scatter(acc["main"], self.vol_basis))
        full = np.zeros(self._pool_shape("main"), dtype=np.complex128)
        full[..., acc["q_keep"]] = t
        g = basis.fold_hermitian_gradient(full)
        cap = None if k_cap is None else k_cap
        g[~basis.make_active_mask(self.vol_basis, self.state_basis, cap, q_cap)] = 0.0
        return {"main": g}

    def finish_curvature(self, acc, k_cap=None, q_cap=None):
        spread = basis.spread_curvature(acc["main"], self.vol_basis.grid_size,
                                        self.vol_basis.padded_size)
        d = _grid_diag_to_cube(spread, self.vol_basis)
        full = np.zeros(self._pool_shape("main"), dtype=np.complex128)
        full[..., acc["q_keep"]] = d
        folded = basis.fold_hermitian_gradient(full)
        return {"main": np.real(folded)}

    def synthesize(self, theta: dict, tau: np.ndarray) -> np.ndarray:
        co = HyperCoefficients(theta["main"], self.vol_basis, self.state_basis,
                               basis.make_active_mask(self.vol_basis, self.state_basis))
        return basis.synthesize_volume(co, tau)


def _grid_diag_to_cube(acc_grid: np.ndarray, vb: VolumeBasis) -> np.ndarray:
    """Read accumulated squared-tap mass back at on-lattice coefficient sites."""
    m, o = vb.padded_size, vb.oversample
    k = vb.band_limit_shell
    kk = np.arange(-k, k + 1) * o
    pos = (kk + m // 2) % m
    p1, p2, p3 = np.meshgrid(pos, pos, pos, indexing="ij")
    idx = (p1 * m + p2) * m + p3
    return np.real(acc_grid[:, idx.ravel()]).T.reshape(2 * k + 1, 2 * k + 1, 2 * k + 1, -1)


class CompositeHyperModel(HyperModel):
    """Sum of supported components with shared pools and affine trajectories."""

    def __init__(self, spec: CompositeSpec, priors: dict[str, PriorSpec] | None = None,
                 default_prior: PriorSpec | None = None):
        self.spec = spec
        self.grid_size = spec.grid.grid_size
        self.pixel_size = spec.grid.pixel_size
        self.k_max = spec.grid.band_limit_shell
        self.oversample = spec.grid.oversample
        self._default_prior = default_prior if default_prior is not None else PriorSpec()
        self._priors = priors if priors is not None else {}
        self._pools: dict[str, tuple[VolumeBasis, StateBasis]] = {}
        self._tau_slices: list[tuple[int, int]] = []
        self._unit_scale: list[float] = []
        off = 0
        for i, comp in enumerate(spec.components):
            name = spec.pool_name(i)
            vb = VolumeBasis(comp.grid_size, spec.grid.pixel_size, comp.band_limit,
                             spec.grid.oversample)
            sb = StateBasis(dims=comp.state_dims, max_degree=comp.max_degree)
            if name in self._pools:
                pass
            else:
                self._pools[name] = (vb, sb)
            self._tau_slices.append((off, off + comp.state_dims))
            off += comp.state_dims
            # Pool coefficients live on the component lattice; converting its
            # spectrum into lab coefficient units carries (N_c / N_lab)^3.
            self._unit_scale.append((comp.grid_size / self.grid_size) ** 3)
        self._state_dim = off

    def pool_bases(self):
        return self._pools

    def state_dim(self) -> int:
        return self._state_dim

    def tau_slices(self) -> list[tuple[int, int]]:
        return list(self._tau_slices)

    def prior_for(self, pool: str) -> PriorSpec:
        return self._priors.get(pool, self._default_prior)

    def learnable_components(self):
        return [i for i, c in enumerate(self.spec.components) if c.trajectory.learnable]

    def static_traj_rows(self) -> np.ndarray:
        return np.stack([c.trajectory.as_row() for c in self.spec.components])

    def zero_theta(self) -> dict:
        theta = super().zero_theta()
        theta["__traj__"] = self.static_traj_rows()
        return theta

    def build_cache(self, theta: dict, q_cap: int | None = None) -> dict:
        cache = {"pools": {}, "q_keep": {}, "theta_traj": theta["__traj__"].copy()}
        for name, (vb, sb) in self._pools.items():
            co = HyperCoefficients(theta[name], vb, sb, basis.make_active_mask(vb, sb))
            q_keep = self._kept_q(name, q_cap)
            cache["pools"][name] = basis.build_slice_cache(co, q_keep=q_keep)
            cache["q_keep"][name] = q_keep
        return cache

    def _component_geometry(self, index: int, quats: np.ndarray, taus: np.ndarray,
                            traj_rows: np.ndarray):
        """Displaced position of a component in the lab frame, per particle."""
        comp = self.spec.components[index]
        lo, hi = self._tau_slices[index]
        tau_m = taus[:, lo:hi]
        row = traj_rows[index]
        disp = np.broadcast_to(comp.support_center + row[:3], (quats.shape[0], 3)).copy()
        if comp.state_dims >= 1:
            disp = disp + tau_m[:, :1] * row[3:6][None, :]
        return tau_m, disp

    def slice_batch(self, cache, quats, taus, points, return_parts=False):
        quats = np.atleast_2d(quats)
        taus = np.atleast_2d(taus)
        if taus.shape[1] != self._state_dim:
            raise DomainError(
                f"tau tuple has {taus.shape[1]} entries, expected {self._state_dim}")
        rot = quat_to_matrix(quats)
        total = np.zeros((quats.shape[0], points.shape[0]), dtype=np.complex128)
        parts = []
        for i, comp in enumerate(self.spec.components):
            name = self.spec.pool_name(i)
            _, sb = self._pools[name]
            tau_m, disp = self._component_geometry(i, quats, taus, cache["theta_traj"])
            p = eval_state_basis_batch(sb, tau_m)[:, cache["q_keep"][name]]
            g = basis.gather_planes(cache["pools"][name], quats, points)
            s_m = self._unit_scale[i] * np.einsum("bpq,bq->bp", g, p, optimize=True)
            lab = np.einsum("bij,bj->bi", rot, disp)
            phase = np.exp(-2j * np.pi * (np.outer(lab[:, 0], points[:, 0])
                                          + np.outer(lab[:, 1], points[:, 1])))
            total += phase * s_m
            if return_parts:
                parts.append({"s": s_m, "phase": phase, "p": p, "gathered": g})
        if return_parts:
            return total, parts
        return total

    def slice_from_parts(self, cache, parts, quats, taus, points):
        """Re-contract stored per-component gathers at new states."""
        quats = np.atleast_2d(quats)
        taus = np.atleast_2d(taus)
        rot = quat_to_matrix(quats)
        total = np.zeros((quats.shape[0], points.shape[0]), dtype=np.complex128)
        for i, comp in enumerate(self.spec.components):
            name = self.spec.pool_name(i)
            _, sb = self._pools[name]
            tau_m, disp = self._component_geometry(i, quats, taus, cache["theta_traj"])
            p = eval_state_basis_batch(sb, tau_m)[:, cache["q_keep"][name]]
            s_m = self._unit_scale[i] * np.einsum("bpq,bq->bp", parts[i]["gathered"], p,
                                                  optimize=True)
            lab = np.einsum("bij,bj->bi", rot, disp)
            phase = np.exp(-2j * np.pi * (np.outer(lab[:, 0], points[:, 0])
                                          + np.outer(lab[:, 1], points[:, 1])))
            total += phase * s_m
        return total

    def new_accumulator(self, q_cap: int | None = None) -> dict:
        acc = {"pools": {}, "q_keep": {}, "traj": np.zeros((len(self.spec.components), 6))}
        for name, (vb, sb) in self._pools.items():
            q_keep = self._kept_q(name, q_cap)
            acc["pools"][name] = np.zeros((q_keep.size, vb.padded_size ** 3),
                                          dtype=np.complex128)
            acc["q_keep"][name] = q_keep
        return acc

    def _per_component_vals(self, acc, quats, taus, points, v, traj_rows, conj_v: bool):
        rot = quat_to_matrix(quats)
        for i, comp in enumerate(self.spec.components):
            name = self.spec.pool_name(i)
            vb, sb = self._pools[name]
            tau_m, disp = self._component_geometry(i, quats, taus, traj_rows)
            p = eval_state_basis_batch(sb, tau_m)[:, acc["q_keep"][name]]
            lab = np.einsum("bij,bj->bi", rot, disp)
            phase = np.exp(-2j * np.pi * (np.outer(lab[:, 0], points[:, 0])
                                          + np.outer(lab[:, 1], points[:, 1])))
            if conj_v:
                v_m = np.conj(v * phase) * self._unit_scale[i]
            else:
                v_m = v * np.conj(phase) * self._unit_scale[i]
            vals = v_m[:, :, None] * p[:, None, :]
            basis.scatter_accumulate(vb.padded_size, quats, points, vals,
                                     acc["pools"][name])
            yield i, comp, name, phase, p, tau_m, rot

    def accumulate_gradient(self, acc, cache, quats, taus, points, v, parts=None):
        traj_rows = cache["theta_traj"]
        learnable = set(self.learnable_components())
        gen = self._per_component_vals(acc, quats, taus, points, v, traj_rows, conj_v=True)
        for i, comp, name, phase, p, tau_m, rot in gen:
            if i not in learnable:
                continue
            if parts is not None:
                s_m = parts[i]["s"]
            else:
                g = basis.gather_planes(cache["pools"][name], quats, points)
                s_m = self._unit_scale[i] * np.einsum("bpq,bq->bp", g, p, optimize=True)
            z = v * phase * s_m  # (B, P)
            for a in range(3):
                alpha = (np.outer(rot[:, 0, a], points[:, 0])
                         + np.outer(rot[:, 1, a], points[:, 1]))
                g_off = 2.0 * np.pi * np.sum(alpha * np.imag(z))
                acc["traj"][i, a] += g_off
                if comp.state_dims >= 1:
                    g_dir = 2.0 * np.pi * np.sum(alpha * np.imag(z) * tau_m[:, :1])
                    acc["traj"][i, 3 + a] += g_dir

    def _accumulate_adjoint(self, acc, quats, taus, points, y):
        for _ in self._per_component_vals(acc, quats, taus, points, y,
                                          self.static_traj_rows(), conj_v=False):
            pass

    def _acc_pool(self, acc, name):
        return acc["pools"][name]

    def accumulate_curvature(self, acc, quats, taus, points, w2):
        for i, comp in enumerate(self.spec.components):
            name = self.spec.pool_name(i)
            vb, sb = self._pools[name]
            lo, hi = self._tau_slices[i]
            p = eval_state_basis_batch(sb, taus[:, lo:hi])[:, acc["q_keep"][name]]
            scale2 = self._unit_scale[i] ** 2
            vals = (scale2 * w2[:, :, None] * p[:, None, :] ** 2).astype(np.complex128)
            basis.scatter_accumulate_squared(vb.padded_size, quats, points, vals,
                                             acc["pools"][name])

    def finish_gradient(self, acc, k_cap=None, q_cap=None):
        out = {}
        for name, (vb, sb) in self._pools.items():
            t = np.conj(basis.adjoint_from_scatter(acc["pools"][name], vb))
            full = np.zeros(self._pool_shape(name), dtype=np.complex128)
            full[..., acc["q_keep"][name]] = t
            g = basis.fold_hermitian_gradient(full)
            cap = None if k_cap is None else _scale_cap(k_cap, self.k_max, vb)
            g[~basis.make_active_mask(vb, sb, cap, q_cap)] = 0.0
            out[name] = g
        out["__traj__"] = acc["traj"].copy()
        return out

    def finish_curvature(self, acc, k_cap=None, q_cap=None):
        out = {}
        for name, (vb, sb) in self._pools.items():
            spread = basis.spread_curvature(acc["pools"][name], vb.grid_size,
                                            vb.padded_size)
            d = _grid_diag_to_cube(spread, vb)
            full = np.zeros(self._pool_shape(name), dtype=np.complex128)
            full[..., acc["q_keep"][name]] = d
            out[name] = np.real(basis.fold_hermitian_gradient(full))
        out["__traj__"] = np.ones((len(self.spec.components), 6))
        return out

    def synthesize(self, theta: dict, tau: np.ndarray) -> np.ndarray:
        """Lab-grid volume: per-component spectra phase-shifted and summed."""
        tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
        if tau.shape != (self._state_dim,):
            raise DomainError(f"tau must have {self._state_dim} entries")
        lab_vb = self.spec.grid
        k = lab_vb.band_limit_shell
        kk = np.arange(-k, k + 1)
        k1, k2, k3 = np.meshgrid(kk, kk, kk, indexing="ij")
        pts = np.stack([k1.ravel(), k2.ravel(), k3.ravel()], axis=1) / lab_vb.grid_size
        cube_flat = np.zeros(pts.shape[0], dtype=np.complex128)
        cache = self.build_cache(theta)
        ident = np.array([[1.0, 0.0, 0.0, 0.0]])
        for i, comp in enumerate(self.spec.components):
            name = self.spec.pool_name(i)
            _, sb = self._pools[name]
            tau_m, disp = self._component_geometry(i, ident, tau[None], theta["__traj__"])
            p = eval_state_basis_batch(sb, tau_m)[:, cache["q_keep"][name]]
            g = basis.gather_planes(cache["pools"][name], ident, pts)
            s_m = self._unit_scale[i] * np.einsum("bpq,bq->bp", g, p, optimize=True)[0]
            phase = np.exp(-2j * np.pi * (pts @ disp[0]))
            cube_flat += phase * s_m
        c = 2 * k + 1
        cube = basis.hermitian_symmetrize(cube_flat.reshape(c, c, c))
        cube[~basis.ball_mask(k)] = 0.0
        co = HyperCoefficients(cube[..., None], lab_vb, StateBasis(dims=0),
                               basis.make_active_mask(lab_vb, StateBasis(dims=0)))
        return basis.synthesize_volume(co, np.zeros(0))
