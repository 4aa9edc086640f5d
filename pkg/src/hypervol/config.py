"""Flat, typed key-value run configuration.

One `key = value` pair per line; `#` starts a comment.  Key names carry units
(`_px`, `_len`, `_vox`) so values are unambiguous.  Every default is written
back into the resolved config emitted next to run outputs, making runs
self-describing: a config plus a seed fully determines a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError

# key -> (type tag, default). Type tags: int, float, str, bool, floats.
SCHEMA: dict[str, tuple[str, object]] = {
    "mode": ("str", "exact_mcmc"),  # exact_mcmc | approx_sgd
    "seed": ("int", 0),
    "threads": ("int", 1),

    "grid.n_voxels": ("int", 48),
    "grid.pixel_size_len": ("float", 3.0),
    "grid.band_limit_shell": ("int", 16),
    "grid.oversample": ("int", 2),

    "phantom.kind": ("str", "pretzel"),  # single_blob | cat | pretzel | custom

    "dataset.n_particles": ("int", 3000),
    "dataset.snr_target": ("float", 0.1),
    "dataset.shift_sigma_px": ("float", 1.5),
    "dataset.max_shift_px": ("float", -1.0),  # -1: default to 10% of N
    "dataset.contrast_sigma_log": ("float", 0.1),
    "dataset.path": ("str", "dataset.hvol"),
    "truth.path": ("str", "truth.hvm"),

    "ctf.wavelength_len": ("float", 0.025),
    "ctf.cs_len": ("float", 2.7e7),
    "ctf.amplitude_contrast": ("float", 0.07),
    "ctf.b_factor_len2": ("float", 0.0),
    "ctf.defocus_min_len": ("float", 10000.0),
    "ctf.defocus_max_len": ("float", 20000.0),

    "model.kind": ("str", "composite"),  # plain | composite
    "model.state_dims": ("int", 0),
    "model.max_degree": ("int", 0),
    "model.use_phantom_layout": ("bool", True),

    "prior.spatial_base": ("float", 0.0),
    "prior.state_growth": ("float", 1.0),
    "prior.adjacent_penalty": ("float", 0.0),

    "sampler.scale_rot": ("float", 0.6),
    "sampler.scale_tau": ("float", 0.25),
    "sampler.scale_shift": ("float", 0.4),
    "sampler.scale_amp": ("float", 0.06),
    "sampler.mala_step": ("float", 0.15),
    "sampler.hmc_step": ("float", 0.05),
    "sampler.hmc_leapfrog": ("int", 5),
    "sampler.sgd_step": ("float", 0.3),
    "sampler.batch_fraction": ("float", 0.2),
    "sampler.k_data_pad": ("int", 2),
    "sampler.precond_refresh": ("int", 25),
    "sampler.shift_prior_sigma_px": ("float", -1.0),  # -1: dataset value (min 0.3)
    "sampler.contrast_prior_sigma_log": ("float", -1.0),

    "stage1.enabled": ("bool", True),
    "stage1.iterations": ("int", 200),
    "stage1.burn_in": ("int", 140),
    "stage1.pose_repeats": ("int", 3),
    "stage1.theta_repeats": ("int", 2),
    "stage1.theta_kind": ("str", "theta_mala"),
    "stage1.marching": ("str", "0:3:0,60:6:0,120:10:0"),
    "stage1.save_every": ("int", 25),
    "stage1.samples_path": ("str", "stage1.hvs"),

    "stage2.enabled": ("bool", True),
    "stage2.iterations": ("int", 300),
    "stage2.burn_in": ("int", 200),
    "stage2.pose_repeats": ("int", 3),
    "stage2.theta_repeats": ("int", 2),
    "stage2.theta_kind": ("str", "theta_mala"),
    "stage2.marching": ("str", "0:4:1,80:8:2,160:12:4,240:16:6"),
    "stage2.save_every": ("int", 25),
    "stage2.samples_path": ("str", "stage2.hvs"),

    "eval.burn_in_fraction": ("float", 0.5),
    "eval.tau_points": ("int", 5),
    "eval.mask_radius_frac": ("float", 0.45),
    "eval.align_grid_points": ("int", 40000),
    "export.tau_grid": ("str", "-1,0,1"),
}

_DYNAMIC_PREFIXES = ("phantom.blob.", "component.")
_DYNAMIC_FIELD_TYPES = {
    "amplitude": "float", "width_vox": "float", "cx": "floats", "cy": "floats",
    "cz": "floats", "state_dim": "int", "component": "int",
    "center_vox": "floats", "radius_vox": "float", "state_dims": "int",
    "max_degree": "int", "share_group": "int", "grid_size": "int",
    "band_limit": "int", "traj_offset_vox": "floats", "traj_direction_vox": "floats",
    "traj_learnable": "bool",
}


def _parse_value(kind: str, text: str):
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise DomainError(f"not a boolean: {text}")
    if kind == "floats":
        return tuple(float(t) for t in text.split())
    return text


def _format_value(kind: str, value) -> str:
    if kind == "floats":
        return " ".join(repr(float(v)) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    return str(value)


def _dynamic_kind(key: str) -> str:
    leaf = key.rsplit(".", 1)[-1]
    if leaf not in _DYNAMIC_FIELD_TYPES:
        raise DomainError(f"unknown config key: {key}")
    return _DYNAMIC_FIELD_TYPES[leaf]


@dataclass
class RunConfig:
    """Resolved configuration: schema defaults overlaid with file values."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, (_, default) in SCHEMA.items():
            self.values.setdefault(key, default)

    def __getitem__(self, key: str):
        if key in self.values:
            return self.values[key]
        raise DomainError(f"unknown config key: {key}")

    def __setitem__(self, key: str, value):
        self.values[key] = value

    def get(self, key, default=None):
        return self.values.get(key, default)

    def dynamic_group(self, prefix: str) -> dict[int, dict]:
        """Collect indexed dynamic keys, e.g. component.00.* -> {0: {...}}."""
        out: dict[int, dict] = {}
        for key, val in self.values.items():
            if not key.startswith(prefix):
                continue
            rest = key[len(prefix):]
            idx_str, leaf = rest.split(".", 1)
            out.setdefault(int(idx_str), {})[leaf] = val
        return out

    def max_shift(self) -> float:
        v = self["dataset.max_shift_px"]
        return 0.1 * self["grid.n_voxels"] if v < 0 else v


def parse_config(path) -> RunConfig:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise DomainError(f"{path}:{lineno}: expected key = value")
        key, _, text = stripped.partition("=")
        key = key.strip()
        if key in SCHEMA:
            kind = SCHEMA[key][0]
        elif key.startswith(_DYNAMIC_PREFIXES):
            kind = _dynamic_kind(key)
        else:
            raise DomainError(f"{path}:{lineno}: unknown config key: {key}")
        values[key] = _parse_value(kind, text)
    return RunConfig(values)


def emit_config(cfg: RunConfig, path) -> None:
    """Write the fully resolved configuration (defaults included)."""
    lines = []
    for key in sorted(cfg.values):
        kind = SCHEMA[key][0] if key in SCHEMA else _dynamic_kind(key)
        lines.append(f"{key} = {_format_value(kind, cfg.values[key])}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Bridges between configs and domain objects
# ---------------------------------------------------------------------------


def phantom_to_config(cfg: RunConfig, spec) -> None:
    """Record every blob parameter so datasets are reproducible from config."""
    for i, blob in enumerate(spec.blobs):
        pre = f"phantom.blob.{i:02d}."
        cfg[pre + "amplitude"] = float(blob.amplitude)
        cfg[pre + "width_vox"] = float(blob.width)
        cfg[pre + "cx"] = tuple(blob.center_path[0])
        cfg[pre + "cy"] = tuple(blob.center_path[1])
        cfg[pre + "cz"] = tuple(blob.center_path[2])
        cfg[pre + "state_dim"] = blob.state_dims_used[0] if blob.state_dims_used else -1
        cfg[pre + "component"] = -1 if blob.component is None else blob.component


def phantom_from_config(cfg: RunConfig, grid):
    from .phantom import BlobTrajectory, PhantomSpec

    blobs = []
    group = cfg.dynamic_group("phantom.blob.")
    state_dims = 0
    for idx in sorted(group):
        f = group[idx]
        path = np.zeros((3, max(len(f["cx"]), len(f["cy"]), len(f["cz"]))))
        for row, key in enumerate(("cx", "cy", "cz")):
            path[row, :len(f[key])] = f[key]
        used = () if f["state_dim"] < 0 else (int(f["state_dim"]),)
        if used:
            state_dims = max(state_dims, used[0] + 1)
        blobs.append(BlobTrajectory(f["amplitude"], f["width_vox"], path,
                                    state_dims_used=used,
                                    component=None if f["component"] < 0 else f["component"]))
    return PhantomSpec(blobs=blobs, state_dims=state_dims, grid=grid, name="custom")


def composite_to_config(cfg: RunConfig, spec) -> None:
    for i, comp in enumerate(spec.components):
        pre = f"component.{i:02d}."
        cfg[pre + "center_vox"] = tuple(comp.support_center)
        cfg[pre + "radius_vox"] = float(comp.support_radius)
        cfg[pre + "state_dims"] = comp.state_dims
        cfg[pre + "max_degree"] = comp.max_degree
        cfg[pre + "share_group"] = -1 if comp.share_group is None else comp.share_group
        cfg[pre + "grid_size"] = comp.grid_size
        cfg[pre + "band_limit"] = comp.band_limit
        cfg[pre + "traj_offset_vox"] = tuple(comp.trajectory.offset)
        cfg[pre + "traj_direction_vox"] = tuple(comp.trajectory.direction)
        cfg[pre + "traj_learnable"] = comp.trajectory.learnable


def composite_from_config(cfg: RunConfig, grid):
    from .model import AffineTrajectory, ComponentSpec, CompositeSpec

    comps = []
    group = cfg.dynamic_group("component.")
    for idx in sorted(group):
        f = group[idx]
        comps.append(ComponentSpec(
            support_center=np.array(f["center_vox"]),
            support_radius=f["radius_vox"],
            state_dims=f["state_dims"], max_degree=f["max_degree"],
            share_group=None if f["share_group"] < 0 else f["share_group"],
            grid_size=f.get("grid_size"), band_limit=f.get("band_limit"),
            trajectory=AffineTrajectory(offset=np.array(f["traj_offset_vox"]),
                                        direction=np.array(f["traj_direction_vox"]),
                                        learnable=f["traj_learnable"])))
    if not comps:
        raise DomainError("composite model requested but no component.* keys found")
    return CompositeSpec(components=comps, grid=grid)


def marching_from_string(text: str) -> list[tuple[int, int, int]]:
    stages = []
    for part in text.split(","):
        bits = part.strip().split(":")
        if len(bits) != 3:
            raise DomainError(f"bad marching stage {part!r}; expected start:K:Q")
        stages.append((int(bits[0]), int(bits[1]), int(bits[2])))
    return stages
