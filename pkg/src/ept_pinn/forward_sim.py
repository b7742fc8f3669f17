"""Synthetic ground truth: phantom rasterisation, FD Helmholtz solve, noise and masks.

Per-voxel arrays are 1-D in x-fastest order (``index = i + nx*(j + ny*k)``);
``Grid.volume`` reshapes one to ``(nz, ny, nx)``.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .physics import EPS0, CoordinateMap, PhysicsConstants, complex_permittivity

log = logging.getLogger(__name__)

DATASET_MAGIC = b"EPTD"
DATASET_FORMAT_VERSION = 1
DIRECT_SOLVE_MAX_UNKNOWNS = 30 ** 3


class HelmholtzSolveError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class Cylinder:
    """Axis along z."""

    center: tuple[float, float, float]
    radius: float
    height: float
    eps_r: float
    sigma: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        return (d[:, 0] ** 2 + d[:, 1] ** 2 <= self.radius ** 2) & (np.abs(d[:, 2]) <= 0.5 * self.height)


@dataclass(frozen=True)
class PhantomSpec:
    outer: Cylinder
    inner: tuple[Cylinder, ...] = ()

    def validate(self) -> None:
        o = self.outer
        for c in self.inner:
            dr = np.hypot(c.center[0] - o.center[0], c.center[1] - o.center[1])
            dz = abs(c.center[2] - o.center[2])
            if dr + c.radius >= o.radius or dz + 0.5 * c.height > 0.5 * o.height + 1e-12:
                raise ValueError(f"compartment {c} is not inside the outer cylinder")

    def to_dict(self) -> dict:
        return {"outer": asdict(self.outer), "inner": [asdict(c) for c in self.inner]}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        def cyl(e):
            return Cylinder(tuple(e["center"]), e["radius"], e["height"], e["eps_r"], e["sigma"])
        return cls(cyl(d["outer"]), tuple(cyl(e) for e in d.get("inner", [])))


PHANTOM_EPS_R = (56.0, 51.0, 65.0, 76.0)
PHANTOM_SIGMA = (0.69, 0.56, 0.84, 1.02)


def default_phantom() -> PhantomSpec:
    """Outer cylinder (compartment 1) holding three inner cylinders 120 degrees apart."""
    inner = []
    for n, angle in enumerate((90.0, 210.0, 330.0), start=1):
        a = np.deg2rad(angle)
        inner.append(Cylinder((0.03 * np.cos(a), 0.03 * np.sin(a), 0.0), 0.015, 0.12,
                              PHANTOM_EPS_R[n], PHANTOM_SIGMA[n]))
    outer = Cylinder((0.0, 0.0, 0.0), 0.06, 0.12, PHANTOM_EPS_R[0], PHANTOM_SIGMA[0])
    return PhantomSpec(outer, tuple(inner))


@dataclass(frozen=True)
class Grid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 3:
            raise ValueError("grid needs at least 3 nodes per axis")
        if min(self.spacing) <= 0:
            raise ValueError("grid spacing must be positive")

    @classmethod
    def cube(cls, n: int = 48, length: float = 0.14) -> "Grid":
        """``n^3`` nodes spanning a centred cube of side ``length`` (nodes on the faces)."""
        h = length / (n - 1)
        return cls((n, n, n), (h, h, h), (-0.5 * length,) * 3)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> tuple[float, float, float]:
        return tuple(o + (n - 1) * h for o, n, h in zip(self.origin, self.dims, self.spacing))

    def axis(self, i: int) -> np.ndarray:
        return self.origin[i] + self.spacing[i] * np.arange(self.dims[i])

    def points(self) -> np.ndarray:
        """Node coordinates, shape (size, 3), x fastest."""
        z, y, x = np.meshgrid(self.axis(2), self.axis(1), self.axis(0), indexing="ij")
        return np.column_stack([x.ravel(), y.ravel(), z.ravel()])

    def volume(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr).reshape(self.dims[::-1])

    def boundary_mask(self) -> np.ndarray:
        nx, ny, nz = self.dims
        v = np.zeros((nz, ny, nx), dtype=bool)
        v[0], v[-1], v[:, 0], v[:, -1], v[:, :, 0], v[:, :, -1] = (True,) * 6
        return v.ravel()

    def coordinate_map(self) -> CoordinateMap:
        return CoordinateMap(tuple(self.origin), self.upper)

    def refined(self, factor: int) -> "Grid":
        """Same box, spacing divided by ``factor`` (original nodes are kept)."""
        dims = tuple(factor * (n - 1) + 1 for n in self.dims)
        return Grid(dims, tuple(h / factor for h in self.spacing), self.origin)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(tuple(int(n) for n in d["dims"]), tuple(d["spacing"]), tuple(d["origin"]))


def rasterize_phantom(spec: PhantomSpec, grid: Grid, k: PhysicsConstants):
    """Complex permittivity per node and the inside-phantom mask.

    Later compartments override earlier ones; air elsewhere.
    """
    spec.validate()
    pts = grid.points()
    eps_r = np.ones(grid.size)
    sigma = np.zeros(grid.size)
    interior = spec.outer.contains(pts)
    for cyl in (spec.outer,) + tuple(spec.inner):
        m = cyl.contains(pts)
        eps_r[m] = cyl.eps_r
        sigma[m] = cyl.sigma
    eps = complex_permittivity(eps_r, sigma, k)
    return eps.as_complex(), interior


def plane_wave(points: np.ndarray, k: PhysicsConstants, direction=(1.0, 0.0, 0.0), eps_c=1.0) -> np.ndarray:
    """``exp(-i k0 sqrt(eps_c) d.r)``; the principal root decays along ``d`` in lossy media."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    return np.exp(-1j * k.k0 * np.sqrt(complex(eps_c)) * (points @ d))


def helmholtz_operator(eps_c: np.ndarray, grid: Grid, k: PhysicsConstants) -> sp.csr_matrix:
    """7-point ``Delta_h + k0^2 eps_c`` on all nodes (rows of boundary nodes are meaningless)."""
    nx, ny, nz = grid.dims
    n = grid.size
    strides = (1, nx, nx * ny)
    diag = k.k0 ** 2 * np.asarray(eps_c, dtype=complex).copy()
    rows, cols, vals = [], [], []
    idx = np.arange(n)
    coords = [idx % nx, (idx // nx) % ny, idx // (nx * ny)]
    for ax in range(3):
        w = 1.0 / grid.spacing[ax] ** 2
        diag -= 2.0 * w
        for sgn in (-1, 1):
            c = coords[ax] + sgn
            ok = (c >= 0) & (c < grid.dims[ax])
            rows.append(idx[ok])
            cols.append(idx[ok] + sgn * strides[ax])
            vals.append(np.full(ok.sum(), w, dtype=complex))
    rows.append(idx)
    cols.append(idx)
    vals.append(diag)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return A


def solve_helmholtz_fd(eps_c: np.ndarray, grid: Grid, k: PhysicsConstants,
                       direction=(1.0, 0.0, 0.0), boundary: np.ndarray | None = None,
                       tol: float = 1e-10, maxiter: int = 20_000, method: str = "auto") -> np.ndarray:
    """Solve ``Delta_h u + k0^2 eps_c u = 0`` at interior nodes with Dirichlet data.

    ``boundary`` gives u on every node (only the outer shell is read);
    by default it is the unit plane wave in air along ``direction``.
    ``method`` is "direct", "bicgstab" or "auto" (direct up to 30^3 unknowns).
    """
    pts = grid.points()
    if boundary is None:
        boundary = plane_wave(pts, k, direction)
    shell = grid.boundary_mask()
    inner = ~shell
    A = helmholtz_operator(eps_c, grid, k)
    A_ii = A[inner][:, inner].tocsc()
    rhs = -(A[inner][:, shell] @ boundary[shell])
    u = np.array(boundary, dtype=complex)
    n_unknown = int(inner.sum())
    if method == "auto":
        method = "direct" if n_unknown <= DIRECT_SOLVE_MAX_UNKNOWNS else "bicgstab"
    if method == "direct":
        lu = spla.splu(A_ii)
        x = lu.solve(rhs)
        for _ in range(2):  # iterative refinement
            x = x + lu.solve(rhs - A_ii @ x)
    elif method == "bicgstab":
        ilu = spla.spilu(A_ii, drop_tol=1e-4, fill_factor=10)
        M = spla.LinearOperator(A_ii.shape, ilu.solve, dtype=complex)
        x, info = spla.bicgstab(A_ii, rhs, rtol=tol, atol=0.0, maxiter=maxiter, M=M)
        res = np.linalg.norm(A_ii @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if info != 0:
            raise HelmholtzSolveError("BiCGStab did not converge", res)
        log.debug("bicgstab converged, relative residual %.2e", res)
    else:
        raise ValueError(f"unknown method '{method}'")
    u[inner] = x
    return u


def stencil_residual(u: np.ndarray, eps_c: np.ndarray, grid: Grid, k: PhysicsConstants) -> np.ndarray:
    """``Delta_h u + k0^2 eps_c u`` at interior nodes (zeros on the shell)."""
    r = helmholtz_operator(eps_c, grid, k) @ u
    r[grid.boundary_mask()] = 0.0
    return r


def add_noise(field_values: np.ndarray, peak_snr: float | None, seed: int,
              mask: np.ndarray | None = None) -> np.ndarray:
    """Complex Gaussian noise with magnitude std ``max|field| / peak_snr``.

    The peak and the noise are taken over ``mask`` (all voxels if None).
    ``peak_snr=None`` or ``inf`` returns an unchanged copy.
    """
    out = np.array(field_values, dtype=complex)
    if peak_snr is None or np.isinf(peak_snr):
        return out
    if not peak_snr > 0:
        raise ValueError("peak_snr must be positive")
    if mask is None:
        mask = np.ones(out.shape, dtype=bool)
    sigma_n = np.abs(out[mask]).max() / peak_snr
    rng = np.random.default_rng(seed)
    m = int(mask.sum())
    noise = rng.normal(0.0, sigma_n / np.sqrt(2.0), size=(2, m))
    out[mask] += noise[0] + 1j * noise[1]
    return out


@dataclass
class SyntheticDataset:
    grid: Grid
    constants: PhysicsConstants
    field: np.ndarray
    noisy_field: np.ndarray
    interior_mask: np.ndarray
    availability_mask: np.ndarray
    eps_r: np.ndarray
    sigma: np.ndarray
    field_scale: float = 1.0
    phantom: PhantomSpec | None = None
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        n = self.grid.size
        for name in ("field", "noisy_field", "interior_mask", "availability_mask", "eps_r", "sigma"):
            if np.shape(getattr(self, name)) != (n,):
                raise ValueError(f"{name} must have {n} entries")
        if np.any(self.availability_mask & ~self.interior_mask):
            raise ValueError("availability mask must lie inside the interior mask")
        if not np.all(np.isfinite(self.noisy_field[self.availability_mask])):
            raise ValueError("available samples must be finite")

    @property
    def coordinate_map(self) -> CoordinateMap:
        return self.grid.coordinate_map()


def apply_mask(ds: SyntheticDataset, kind: str = "full", axis: int = 0, side: str = "upper") -> SyntheticDataset:
    """Availability: every interior voxel ("full"), or drop one half of the box ("half")."""
    if kind == "full":
        avail = ds.interior_mask.copy()
    elif kind == "half":
        if axis not in (0, 1, 2) or side not in ("upper", "lower"):
            raise ValueError("half mask needs axis in 0..2 and side in {upper, lower}")
        coord = ds.grid.points()[:, axis]
        mid = ds.grid.origin[axis] + 0.5 * (ds.grid.dims[axis] - 1) * ds.grid.spacing[axis]
        drop = coord > mid + 1e-12 if side == "upper" else coord < mid - 1e-12
        avail = ds.interior_mask & ~drop
    else:
        raise ValueError(f"unknown mask kind '{kind}'")
    meta = dict(ds.meta, mask={"kind": kind, "axis": axis, "side": side})
    return replace(ds, availability_mask=avail, meta=meta)


@dataclass
class GenerateConfig:
    grid_n: int = 48
    box_length: float = 0.14
    frequency: float = 297.2e6
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    peak_snr: float | None = 100.0
    seed: int = 0
    mask: str = "full"
    mask_axis: int = 0
    mask_side: str = "upper"
    phantom: dict | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "GenerateConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generate options: {sorted(unknown)}")
        d = dict(d)
        if "direction" in d:
            d["direction"] = tuple(d["direction"])
        return cls(**d)


def generate(cfg: GenerateConfig) -> SyntheticDataset:
    """Phantom, forward solve, noise, mask."""
    k = PhysicsConstants(cfg.frequency)
    grid = Grid.cube(cfg.grid_n, cfg.box_length)
    phantom = PhantomSpec.from_dict(cfg.phantom) if cfg.phantom else default_phantom()
    eps_c, interior = rasterize_phantom(phantom, grid, k)
    u = solve_helmholtz_fd(eps_c, grid, k, cfg.direction)
    noisy = add_noise(u, cfg.peak_snr, cfg.seed, mask=interior)
    noisy[~interior] = u[~interior]
    eps_r = eps_c.real.copy()
    sigma = -eps_c.imag * k.omega * EPS0
    ds = SyntheticDataset(grid, k, u, noisy, interior, interior.copy(), eps_r, sigma, phantom=phantom,
                          meta={"seed": cfg.seed, "peak_snr": cfg.peak_snr, "direction": list(cfg.direction)})
    ds = apply_mask(ds, cfg.mask, cfg.mask_axis, cfg.mask_side)
    ds.field_scale = 1.0 / float(np.abs(ds.noisy_field[ds.availability_mask]).max())
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# dataset file: b"EPTD" | u32 version | u64 header length | JSON header |
# f64 arrays (field re/im, noisy re/im, eps_r, sigma) | u8 masks (interior, available)


def save_dataset(ds: SyntheticDataset, path) -> None:
    ds.validate()
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "grid": ds.grid.to_dict(),
        "constants": ds.constants.to_dict(),
        "phantom": ds.phantom.to_dict() if ds.phantom else None,
        "field_scale": ds.field_scale,
        "seed": ds.meta.get("seed"),
        "peak_snr": ds.meta.get("peak_snr"),
        "mask": ds.meta.get("mask", {"kind": "full"}),
        "meta": ds.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for arr in (ds.field.real, ds.field.imag, ds.noisy_field.real, ds.noisy_field.imag, ds.eps_r, ds.sigma):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for m in (ds.interior_mask, ds.availability_mask):
            f.write(np.asarray(m, dtype=np.uint8).tobytes())


def load_dataset(path) -> SyntheticDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != DATASET_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset format version {version}")
    (n_hdr,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + n_hdr])
    grid = Grid.from_dict(header["grid"])
    n = grid.size
    pos = 16 + n_hdr
    expected = pos + 6 * 8 * n + 2 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    arrs = []
    for _ in range(6):
        arrs.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64))
        pos += 8 * n
    masks = []
    for _ in range(2):
        masks.append(np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos).astype(bool))
        pos += n
    phantom = PhantomSpec.from_dict(header["phantom"]) if header.get("phantom") else None
    ds = SyntheticDataset(grid, PhysicsConstants.from_dict(header["constants"]),
                          arrs[0] + 1j * arrs[1], arrs[2] + 1j * arrs[3], masks[0], masks[1],
                          arrs[4], arrs[5], float(header["field_scale"]), phantom, header.get("meta", {}))
    ds.validate()
    return ds
