"""Constants, permittivity conversions, Helmholtz residual and training loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diff_engine as ad
from . import network as nw

EPS0 = 8.8541878128e-12  # F/m
C0 = 299_792_458.0  # m/s
LARMOR_MHZ_PER_T = 42.577


@dataclass(frozen=True)
class PhysicsConstants:
    """Excitation frequency and the quantities derived from it."""

    frequency: float = 297.2e6  # Hz, proton Larmor frequency at 7 T

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency

    @property
    def k0(self) -> float:
        return self.omega / C0

    def to_dict(self) -> dict:
        return {"frequency": self.frequency, "eps0": EPS0, "c0": C0}

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicsConstants":
        return cls(frequency=float(d["frequency"]))


@dataclass(frozen=True)
class ComplexPermittivity:
    """``re`` is the relative permittivity, ``im = -sigma / (omega eps0)``."""

    re: np.ndarray | float
    im: np.ndarray | float

    def __complex__(self):
        return complex(self.re, self.im)

    def as_complex(self):
        return np.asarray(self.re) + 1j * np.asarray(self.im)


def complex_permittivity(eps_r, sigma, k: PhysicsConstants) -> ComplexPermittivity:
    if not k.omega > 0:
        raise ValueError("angular frequency must be positive")
    return ComplexPermittivity(eps_r, _scalar_or_array(-np.asarray(sigma, dtype=float) / (k.omega * EPS0)))


def eps_to_props(eps: ComplexPermittivity, k: PhysicsConstants):
    """Back to ``(eps_r, sigma)``."""
    if not k.omega > 0:
        raise ValueError("angular frequency must be positive")
    return eps.re, _scalar_or_array(-np.asarray(eps.im, dtype=float) * (k.omega * EPS0))


def _scalar_or_array(a: np.ndarray):
    return float(a) if a.ndim == 0 else a


@dataclass(frozen=True)
class CoordinateMap:
    """Affine map from a physical box (metres) onto ``[-1, 1]^3``."""

    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    def __post_init__(self):
        if not all(u > l for l, u in zip(self.lower, self.upper)):
            raise ValueError("upper corner must exceed lower corner on every axis")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lower) + np.asarray(self.upper))

    @property
    def scale(self) -> np.ndarray:
        """``s_i = 2 / L_i`` in 1/m."""
        return 2.0 / (np.asarray(self.upper) - np.asarray(self.lower))

    def to_normalized(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.center) * self.scale

    def to_physical(self, u) -> np.ndarray:
        return np.asarray(u, dtype=float) / self.scale + self.center

    def contains(self, x, tol: float = 1e-9) -> np.ndarray:
        u = self.to_normalized(x)
        return np.all(np.abs(u) <= 1.0 + tol, axis=-1)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, d: dict) -> "CoordinateMap":
        return cls(tuple(d["lower"]), tuple(d["upper"]))


def helmholtz_residual(values: ad.Var, laplacians: ad.Var, eps: ad.Var, k: PhysicsConstants):
    """Real and imaginary parts of ``lap B + k0^2 eps_c B``.

    ``values``, ``laplacians`` and ``eps`` hold (Re, Im) pairs in their last
    axis; ``laplacians`` must already be in physical units (1/m^2).
    """
    br, bi = ad.component(values, 0), ad.component(values, 1)
    lr, li = ad.component(laplacians, 0), ad.component(laplacians, 1)
    er, ei = ad.component(eps, 0), ad.component(eps, 1)
    k2 = k.k0 ** 2
    re = lr + ad.scale(er * br - ei * bi, k2)
    im = li + ad.scale(er * bi + ei * br, k2)
    return re, im


@dataclass
class LossBatch:
    """Points (normalized coordinates) entering one loss evaluation.

    ``data_rows`` optionally marks the data points as rows of
    ``colloc_points``; the field values are then shared instead of
    recomputed.
    """

    colloc_points: np.ndarray
    data_points: np.ndarray
    data_values: np.ndarray
    data_rows: np.ndarray | None = None

    def __post_init__(self):
        if len(self.colloc_points) == 0 or len(self.data_points) == 0:
            raise ValueError("data and collocation batches must be nonempty")
        if self.data_values.shape != (len(self.data_points), 2):
            raise ValueError("data_values must have shape (n_data, 2)")

    @classmethod
    def from_rows(cls, colloc_points, data_rows, data_values) -> "LossBatch":
        rows = np.asarray(data_rows, dtype=np.intp)
        return cls(colloc_points, colloc_points[rows], np.asarray(data_values, dtype=float), rows)


@dataclass
class LossTerms:
    total: ad.Var
    data: ad.Var
    residual: ad.Var
    extras: dict = field(default_factory=dict)


def total_loss(field_cfg: nw.MlpConfig, field_layers, eps_cfg: nw.MlpConfig, eps_layers,
               batch: LossBatch, lam: float, k: PhysicsConstants, cmap: CoordinateMap) -> LossTerms:
    """``L_data + lam * L_r`` built on the graph of the given parameter leaves.

    ``L_data`` is the mean over data points of the squared real plus squared
    imaginary misfit; ``L_r`` the mean over collocation points of the squared
    residual magnitude.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    values, lap, _ = nw.forward_jet_graph(field_cfg, field_layers, batch.colloc_points,
                                          axis_scale=tuple(cmap.scale))
    eps = nw.forward_graph(eps_cfg, eps_layers, batch.colloc_points)
    re, im = helmholtz_residual(values, lap, eps, k)
    l_res = ad.mean_all(ad.square(re) + ad.square(im))

    if batch.data_rows is not None:
        pred = ad.take(values, batch.data_rows)
    else:
        pred = nw.forward_graph(field_cfg, field_layers, batch.data_points)
    diff = pred - batch.data_values.astype(pred.value.dtype, copy=False)
    l_data = ad.scale(ad.sum_all(ad.square(diff)), 1.0 / len(batch.data_points))
    total = l_data + ad.scale(l_res, lam)
    return LossTerms(total, l_data, l_res, {"values": values, "eps": eps})
