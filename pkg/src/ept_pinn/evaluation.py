"""Error metrics, dense re-sampling of trained networks and slice export."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import network as nw
from .forward_sim import Grid, SyntheticDataset
from .physics import ComplexPermittivity, CoordinateMap, PhysicsConstants, eps_to_props

REPORT_FORMAT_VERSION = 1


def pnae(pred, truth, mask=None) -> float:
    """Peak-normalised absolute error in percent.

    Mean over ``mask`` of ``|pred - truth|`` divided by the largest
    ``|truth|`` over ``mask``.  Complex inputs use the complex modulus.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if mask is None:
        mask = np.ones(truth.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    peak = np.abs(truth[mask]).max()
    if peak == 0:
        raise ValueError("truth is zero over the mask")
    return float(np.mean(np.abs(pred[mask] - truth[mask])) / peak * 100.0)


@dataclass
class SampledMaps:
    b1: np.ndarray  # complex, unscaled (same units as the measurements)
    eps_r: np.ndarray
    sigma: np.ndarray


def sample_networks(field_params: nw.MlpParams, eps_params: nw.MlpParams, grid: Grid,
                    cmap: CoordinateMap, k: PhysicsConstants, field_scale: float = 1.0,
                    chunk: int = 65_536) -> SampledMaps:
    """Evaluate both networks at every node of ``grid``.

    Nodes must lie inside the map's box; the field is divided by
    ``field_scale`` to undo the training normalisation.
    """
    pts = grid.points()
    if not np.all(cmap.contains(pts)):
        raise ValueError("grid extends outside the network's coordinate box")
    u = cmap.to_normalized(pts)
    b = np.empty(len(u), dtype=complex)
    e = np.empty((len(u), 2))
    for s in range(0, len(u), chunk):
        fb = nw.forward(field_params, u[s:s + chunk])
        b[s:s + chunk] = fb[:, 0] + 1j * fb[:, 1]
        e[s:s + chunk] = nw.forward(eps_params, u[s:s + chunk])
    eps_r, sigma = eps_to_props(ComplexPermittivity(e[:, 0], e[:, 1]), k)
    return SampledMaps(b / field_scale, np.asarray(eps_r, dtype=float), np.asarray(sigma, dtype=float))


@dataclass
class EvalReport:
    pnae_b1: float
    pnae_eps: float
    pnae_sigma: float
    voxel_count: int
    grid: dict
    region: str = "interior"
    format_version: int = REPORT_FORMAT_VERSION
    slices: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self, timestamp: str | None = None) -> str:
        d = asdict(self)
        if timestamp is not None:
            d["timestamp"] = timestamp
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d.pop("timestamp", None)
        return cls(**d)


def evaluate(field_params: nw.MlpParams, eps_params: nw.MlpParams, ds: SyntheticDataset,
             grid: Grid | None = None, per_slice_axis: int | None = None) -> EvalReport:
    """PNAE of field, permittivity and conductivity over the phantom interior.

    With ``grid`` given, the networks are sampled there and compared with
    the truth at the dataset nodes that coincide with it; by default the
    dataset grid is used.
    """
    cmap = ds.coordinate_map
    k = ds.constants
    maps = sample_networks(field_params, eps_params, ds.grid, cmap, k, ds.field_scale)
    extra = {}
    if grid is not None and grid != ds.grid:
        fine = sample_networks(field_params, eps_params, grid, cmap, k, ds.field_scale)
        idx = _matching_nodes(ds.grid, grid)
        if idx is not None:
            maps = SampledMaps(fine.b1[idx], fine.eps_r[idx], fine.sigma[idx])
        extra["sampled_grid"] = grid.to_dict()
        extra["sampled_voxels"] = grid.size
    m = ds.interior_mask
    rep = EvalReport(
        pnae_b1=pnae(maps.b1, ds.field, m),
        pnae_eps=pnae(maps.eps_r, ds.eps_r, m),
        pnae_sigma=pnae(maps.sigma, ds.sigma, m),
        voxel_count=int(m.sum()),
        grid=ds.grid.to_dict(),
        extra=extra,
    )
    if per_slice_axis is not None:
        rep.slices = _slice_breakdown(maps, ds, per_slice_axis)
    return rep


def _matching_nodes(coarse: Grid, fine: Grid):
    """Indices into ``fine`` of the nodes of ``coarse``, or None if they do not nest."""
    idx = []
    for ax in range(3):
        pos = (coarse.axis(ax) - fine.origin[ax]) / fine.spacing[ax]
        r = np.rint(pos).astype(int)
        if np.max(np.abs(pos - r)) > 1e-6 or r.min() < 0 or r.max() >= fine.dims[ax]:
            return None
        idx.append(r)
    nx, ny = fine.dims[0], fine.dims[1]
    k, j, i = np.meshgrid(idx[2], idx[1], idx[0], indexing="ij")
    return (i + nx * (j + ny * k)).ravel()


def _slice_breakdown(maps: SampledMaps, ds: SyntheticDataset, axis: int) -> list[dict]:
    out = []
    vol = {name: ds.grid.volume(a) for name, a in
           (("b1", maps.b1), ("eps", maps.eps_r), ("sigma", maps.sigma), ("mask", ds.interior_mask),
            ("tb1", ds.field), ("teps", ds.eps_r), ("tsigma", ds.sigma))}
    vax = 2 - axis
    m = ds.interior_mask
    peaks = {"b1": np.abs(ds.field[m]).max(), "eps": np.abs(ds.eps_r[m]).max(),
             "sigma": np.abs(ds.sigma[m]).max()}
    for n in range(ds.grid.dims[axis]):
        sl = [slice(None)] * 3
        sl[vax] = n
        mk = vol["mask"][tuple(sl)]
        if not mk.any():
            continue
        row = {"axis": axis, "index": n, "voxels": int(mk.sum())}
        for name, t in (("b1", "tb1"), ("eps", "teps"), ("sigma", "tsigma")):
            err = np.abs(vol[name][tuple(sl)][mk] - vol[t][tuple(sl)][mk])
            row[f"pnae_{name}"] = float(err.mean() / peaks[name] * 100.0)
        out.append(row)
    return out


def slice_of(volume_flat: np.ndarray, grid: Grid, axis: int, index: int) -> np.ndarray:
    """2-D slice at ``index`` along ``axis``; rows run along the slower remaining axis."""
    if not 0 <= index < grid.dims[axis]:
        raise IndexError(f"slice index {index} outside 0..{grid.dims[axis] - 1}")
    vol = grid.volume(volume_flat)  # (nz, ny, nx)
    return np.take(vol, index, axis=2 - axis)


def export_slice(values: np.ndarray, grid: Grid, axis: int, index: int, path, part: str = "abs") -> np.ndarray:
    """Write one slice as CSV (17 significant digits) and return what was written.

    For complex maps ``part`` selects abs, re, im or phase.
    """
    sl = slice_of(values, grid, axis, index)
    if np.iscomplexobj(sl):
        sl = {"abs": np.abs, "re": np.real, "im": np.imag, "phase": np.angle}[part](sl)
    sl = np.asarray(sl, dtype=float)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in sl:
            w.writerow([f"{x:.17g}" for x in row])
    return sl


def read_slice(path) -> np.ndarray:
    with open(path, newline="") as f:
        return np.array([[float(x) for x in row] for row in csv.reader(f)])
