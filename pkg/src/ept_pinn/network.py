"""Fully-connected sine networks mapping 3D coordinates to two outputs."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diff_engine as ad

MODEL_MAGIC = b"EPTM"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of one coordinate network.

    ``hidden_layers`` counts sine layers; a linear output layer follows them.
    Every sine layer computes ``sin(omega0 * (W a + b))`` and the output
    layer ``output_scale * (W a + b)``.  The scale lets a network whose
    outputs are large (tens) start from the usual small-output init without
    Adam spending its steps on amplitude alone.
    """

    input_dim: int = 3
    hidden_layers: int = 3
    hidden_width: int = 128
    output_dim: int = 2
    omega0: float = 30.0
    output_scale: float = 1.0

    def __post_init__(self):
        if self.input_dim != 3:
            raise ValueError("input_dim must be 3")
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("need at least one hidden layer of width >= 1")
        if self.output_dim != 2:
            raise ValueError("output_dim must be 2")
        if not self.omega0 > 0:
            raise ValueError("omega0 must be positive")
        if not (np.isfinite(self.output_scale) and self.output_scale > 0):
            raise ValueError("output_scale must be positive")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(fan_out, fan_in)`` of every weight matrix, input to output."""
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(**{k: d[k] for k in ("input_dim", "hidden_layers", "hidden_width",
                                        "output_dim", "omega0", "output_scale") if k in d})


@dataclass
class MlpParams:
    config: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flatten(self) -> np.ndarray:
        """Layer by layer: weight (row-major), then bias."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, config: MlpConfig, flat: np.ndarray) -> "MlpParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (config.n_params,):
            raise ValueError(f"expected {config.n_params} parameters, got {flat.shape}")
        weights, biases, pos = [], [], 0
        for o, i in config.layer_shapes:
            weights.append(flat[pos:pos + o * i].reshape(o, i).copy())
            pos += o * i
            biases.append(flat[pos:pos + o].copy())
            pos += o
        return cls(config, weights, biases)

    def copy(self) -> "MlpParams":
        return MlpParams(self.config, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_sine_mlp(config: MlpConfig, seed: int) -> MlpParams:
    """Sine-network initialisation.

    First layer: ``U(-1/fan_in, 1/fan_in)``.  Later layers (including the
    linear output): ``U(-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0)``.
    Biases start at zero.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k, (o, i) in enumerate(config.layer_shapes):
        bound = 1.0 / i if k == 0 else np.sqrt(6.0 / i) / config.omega0
        weights.append(rng.uniform(-bound, bound, size=(o, i)))
        biases.append(np.zeros(o))
    return MlpParams(config, weights, biases)


def forward(params: MlpParams, points) -> np.ndarray:
    """Plain evaluation at ``points`` of shape (n, 3) (or a single 3-vector)."""
    x = np.asarray(points, dtype=np.float64)
    single = x.ndim == 1
    a = x.reshape(1, -1) if single else x
    w0 = params.config.omega0
    n = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        a = np.sin(w0 * z) if k < n - 1 else params.config.output_scale * z
    return a[0] if single else a


def leaves(params: MlpParams, graph: ad.Graph, dtype=np.float64) -> list[tuple[ad.Var, ad.Var]]:
    """Record every weight and bias as a parameter leaf on ``graph``."""
    return [(ad.record_leaf(w.astype(dtype, copy=False), graph, is_parameter=True),
             ad.record_leaf(b.astype(dtype, copy=False), graph, is_parameter=True))
            for w, b in zip(params.weights, params.biases)]


def forward_graph(config: MlpConfig, layers, points) -> ad.Var:
    """Evaluation on the graph; ``layers`` from :func:`leaves`.  Returns (n, 2)."""
    a = np.asarray(points, dtype=layers[0][0].value.dtype)
    n = len(layers)
    for k, (w, b) in enumerate(layers):
        if k < n - 1:
            a = ad.sin(ad.linear(a, w, b, factor=config.omega0))
        else:
            a = ad.linear(a, w, b, factor=config.output_scale)
    return a


def forward_jet_graph(config: MlpConfig, layers, points, axis_scale=(1.0, 1.0, 1.0),
                      layout: ad.JetLayout = ad.TRACE) -> tuple[ad.Var, ad.Var, ad.Jet3]:
    """Jet evaluation on the graph.

    Returns ``(values, laplacians, output_jet)`` where values and laplacians
    have shape (n, 2).  With ``axis_scale = s`` the Laplacian is
    ``sum_i s_i**2 d2f/du_i^2``; the default gives the plain Laplacian in
    the network's own coordinates.
    """
    graph = layers[0][0].graph
    jet = ad.jet_input(points, graph, layout, axis_scale, dtype=layers[0][0].value.dtype)
    n = len(layers)
    for k, (w, b) in enumerate(layers):
        if k < n - 1:
            jet = ad.jet_sin(ad.jet_affine(jet, w, b, factor=config.omega0))
        else:
            jet = ad.jet_affine(jet, w, b, factor=config.output_scale)
    return jet.data[0], ad.laplacian(jet), jet


def forward_jet(params: MlpParams, points, axis_scale=(1.0, 1.0, 1.0),
                layout: ad.JetLayout = ad.TRACE, graph: ad.Graph | None = None):
    """Values and Laplacians of the network at ``points`` as graph nodes.

    Convenience wrapper that records the parameters on ``graph`` (a new one
    if omitted).  Returns ``(values, laplacians, layers)``.
    """
    if graph is None:
        graph = ad.Graph()
    layers = leaves(params, graph)
    values, lap, _ = forward_jet_graph(params.config, layers, points, axis_scale, layout)
    return values, lap, layers


# ---------------------------------------------------------------------------
# model file: b"EPTM" | u32 version | u64 header length | JSON header | f64 params


def save_model(path, networks: dict[str, MlpParams], metadata: dict | None = None,
               extra: dict[str, np.ndarray] | None = None) -> None:
    """Write networks (in the given order) and optional extra f64 arrays.

    The JSON header lists each network's config, parameter count and any
    ``metadata``; arrays follow back to back as little-endian f64.
    """
    extra = extra or {}
    header = dict(metadata or {})
    header["format_version"] = MODEL_FORMAT_VERSION
    header["networks"] = [{"name": name, "config": asdict(p.config), "n_params": p.config.n_params}
                          for name, p in networks.items()]
    header["extra"] = [{"name": k, "length": int(np.size(v))} for k, v in extra.items()]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", MODEL_FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for p in networks.values():
            f.write(p.flatten().astype("<f8").tobytes())
        for v in extra.values():
            f.write(np.asarray(v, dtype="<f8").ravel().tobytes())


def load_model(path) -> tuple[dict[str, MlpParams], dict, dict[str, np.ndarray]]:
    """Inverse of :func:`save_model`: ``(networks, header, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    (n,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + n])
    pos = 16 + n
    networks = {}
    for entry in header["networks"]:
        cfg = MlpConfig.from_dict(entry["config"])
        k = entry["n_params"]
        flat = np.frombuffer(raw, dtype="<f8", count=k, offset=pos).astype(np.float64)
        networks[entry["name"]] = MlpParams.unflatten(cfg, flat)
        pos += 8 * k
    extra = {}
    for entry in header.get("extra", []):
        k = entry["length"]
        extra[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=k, offset=pos).astype(np.float64)
        pos += 8 * k
    if pos != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    return networks, header, extra
