"""Joint Adam training of the field and permittivity networks."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diff_engine as ad
from . import network as nw
from .forward_sim import SyntheticDataset
from .physics import LossBatch, total_loss

log = logging.getLogger(__name__)

FULL_SCHEDULE = ((0, 1e-3), (40_000, 1e-4), (80_000, 1e-5))
LOG_HEADER = ("iteration", "loss_total", "loss_data", "loss_residual", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 120_000
    lr_schedule: tuple[tuple[int, float], ...] = FULL_SCHEDULE
    lam: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    field_seed: int = 1
    eps_seed: int = 2
    log_every: int = 100
    checkpoint_every: int = 10_000
    max_nonfinite: int = 10
    # None trains on every point each iteration; otherwise a random subset of
    # the collocation points (and the data points among them) per iteration
    batch_size: int | None = None
    batch_seed: int = 0
    # arithmetic precision of the loss graph; parameters and Adam stay float64
    dtype: str = "float64"

    def __post_init__(self):
        self.lr_schedule = tuple((int(s), float(r)) for s, r in self.lr_schedule)
        starts = [s for s, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("schedule starts must increase strictly from 0")
        if any(r <= 0 for _, r in self.lr_schedule):
            raise ValueError("learning rates must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    @classmethod
    def compressed(cls, iterations: int, **kw) -> "TrainConfig":
        """Full-length schedule with its phase boundaries scaled to ``iterations``.

        Phases that collapse onto the same start (very short runs) keep the
        later rate.
        """
        starts = {}
        for s, r in FULL_SCHEDULE:
            starts[round(s * iterations / 120_000)] = r
        return cls(iterations=iterations, lr_schedule=tuple(sorted(starts.items())), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        if "lr_schedule" in d:
            d["lr_schedule"] = tuple(tuple(x) for x in d["lr_schedule"])
        return cls(**d)


def lr_at(iteration: int, schedule) -> float:
    """Rate of the last schedule entry starting at or before ``iteration``."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    rate = schedule[0][1]
    for start, r in schedule:
        if start <= iteration:
            rate = r
        else:
            break
    return rate


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update; returns ``(new_params, new_state)`` and leaves inputs untouched."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and state must have equal length")
    if not np.all(np.isfinite(grads)):
        raise ad.NonFiniteError("adam_step", "gradient has non-finite entries")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


@dataclass
class TrainingProblem:
    """Arrays derived from a dataset that every iteration needs."""

    colloc_points: np.ndarray  # normalized coords of interior voxels
    data_rows: np.ndarray  # rows of colloc_points carrying a measurement
    data_values: np.ndarray  # scaled (Re, Im) measurements
    interior_index: np.ndarray  # voxel index of each collocation point

    @classmethod
    def from_dataset(cls, ds: SyntheticDataset) -> "TrainingProblem":
        cmap = ds.coordinate_map
        interior_index = np.flatnonzero(ds.interior_mask)
        pts = cmap.to_normalized(ds.grid.points()[interior_index])
        avail = ds.availability_mask[interior_index]
        rows = np.flatnonzero(avail)
        b = ds.noisy_field[interior_index[rows]] * ds.field_scale
        return cls(pts, rows, np.column_stack([b.real, b.imag]), interior_index)

    def full_batch(self) -> LossBatch:
        return LossBatch.from_rows(self.colloc_points, self.data_rows, self.data_values)

    def sample(self, size: int, rng: np.random.Generator) -> LossBatch:
        n = len(self.colloc_points)
        pick = np.sort(rng.choice(n, size=min(size, n), replace=False))
        has_data = np.zeros(n, dtype=bool)
        has_data[self.data_rows] = True
        value_of = np.full(n, -1)
        value_of[self.data_rows] = np.arange(len(self.data_rows))
        local = np.flatnonzero(has_data[pick])
        if len(local) == 0:
            # guarantee a nonempty data term
            extra = self.data_rows[rng.integers(len(self.data_rows))]
            pick = np.sort(np.append(pick, extra))
            local = np.flatnonzero(has_data[pick])
        values = self.data_values[value_of[pick[local]]]
        return LossBatch.from_rows(self.colloc_points[pick], local, values)


@dataclass
class TrainState:
    field: nw.MlpParams
    eps: nw.MlpParams
    adam: AdamState
    iteration: int = 0
    history: list[tuple] = field(default_factory=list)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.field.flatten(), self.eps.flatten()])

    def set_flat(self, flat: np.ndarray) -> None:
        n1 = self.field.config.n_params
        self.field = nw.MlpParams.unflatten(self.field.config, flat[:n1])
        self.eps = nw.MlpParams.unflatten(self.eps.config, flat[n1:])


def init_state(field_cfg: nw.MlpConfig, eps_cfg: nw.MlpConfig, cfg: TrainConfig) -> TrainState:
    f = nw.init_sine_mlp(field_cfg, cfg.field_seed)
    e = nw.init_sine_mlp(eps_cfg, cfg.eps_seed)
    return TrainState(f, e, AdamState.zeros(field_cfg.n_params + eps_cfg.n_params))


def loss_and_grad(state: TrainState, batch: LossBatch, lam: float, ds: SyntheticDataset,
                  need_grad: bool = True, dtype: str = "float64"):
    """Loss components (floats) and, optionally, the flat gradient for ``state``."""
    g = ad.Graph()
    fl = nw.leaves(state.field, g, np.dtype(dtype))
    el = nw.leaves(state.eps, g, np.dtype(dtype))
    terms = total_loss(state.field.config, fl, state.eps.config, el, batch, lam,
                       ds.constants, ds.coordinate_map)
    losses = (float(terms.total.value), float(terms.data.value), float(terms.residual.value))
    if not need_grad:
        return losses, None
    grads = ad.backward(terms.total)
    flat = np.concatenate([np.concatenate([grads[w].ravel(), grads[b].ravel()]) for w, b in fl + el])
    flat = flat.astype(np.float64)
    return losses, flat


def evaluate_loss(state: TrainState, ds: SyntheticDataset, lam: float) -> tuple[float, float, float]:
    """Full-batch ``(total, data, residual)`` at the current parameters."""
    losses, _ = loss_and_grad(state, TrainingProblem.from_dataset(ds).full_batch(), lam, ds, need_grad=False)
    return losses


def save_checkpoint(path, state: TrainState, field_cfg_seed: int, eps_cfg_seed: int,
                    ds: SyntheticDataset, train_cfg: TrainConfig) -> None:
    meta = {
        "iteration": state.iteration,
        "seeds": {"field": field_cfg_seed, "eps": eps_cfg_seed},
        "train_config": train_cfg.to_dict(),
        "grid": ds.grid.to_dict(),
        "coordinate_map": ds.coordinate_map.to_dict(),
        "constants": ds.constants.to_dict(),
        "field_scale": ds.field_scale,
        "adam_t": state.adam.t,
    }
    nw.save_model(path, {"field": state.field, "eps": state.eps}, meta,
                  extra={"adam_m": state.adam.m, "adam_v": state.adam.v})


def load_checkpoint(path) -> tuple[TrainState, dict]:
    nets, header, extra = nw.load_model(path)
    if "adam_m" in extra:
        adam = AdamState(extra["adam_m"].copy(), extra["adam_v"].copy(), int(header.get("adam_t", 0)))
    else:
        n = nets["field"].config.n_params + nets["eps"].config.n_params
        adam = AdamState.zeros(n)
    state = TrainState(nets["field"], nets["eps"], adam, int(header.get("iteration", 0)))
    return state, header


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for it, tot, dat, res, lr in rows:
            w.writerow([it, repr(tot), repr(dat), repr(res), repr(lr)])


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


def train(ds: SyntheticDataset, field_cfg: nw.MlpConfig, eps_cfg: nw.MlpConfig, cfg: TrainConfig,
          state: TrainState | None = None, checkpoint_path=None, log_path=None,
          progress=None) -> TrainState:
    """Run (or resume) joint training until ``cfg.iterations``.

    The loss row logged for iteration ``i`` is evaluated over every point at
    the parameters before the ``i``-th update, whatever the batch size.  A
    final row is logged at ``cfg.iterations``.
    """
    problem = TrainingProblem.from_dataset(ds)
    if len(problem.data_rows) == 0:
        raise TrainingError("dataset has no available samples")
    if state is None:
        state = init_state(field_cfg, eps_cfg, cfg)
    full = problem.full_batch()
    failures = 0

    def batch_for(it: int) -> LossBatch:
        if cfg.batch_size is None or cfg.batch_size >= len(problem.colloc_points):
            return full
        return problem.sample(cfg.batch_size, np.random.default_rng((cfg.batch_seed, it)))

    def checkpoint():
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state, cfg.field_seed, cfg.eps_seed, ds, cfg)

    while state.iteration < cfg.iterations:
        it = state.iteration
        lr = lr_at(it, cfg.lr_schedule)
        try:
            batch = batch_for(it)
            losses, grad = loss_and_grad(state, batch, cfg.lam, ds, dtype=cfg.dtype)
            new_flat, new_adam = adam_step(state.flat(), grad, state.adam, lr,
                                           cfg.beta1, cfg.beta2, cfg.adam_eps)
        except ad.NonFiniteError as exc:
            failures += 1
            log.warning("iteration %d aborted: %s", it, exc)
            if failures > cfg.max_nonfinite:
                raise TrainingError(f"too many non-finite iterations (last: {exc})") from exc
            state.iteration += 1
            continue
        if it % cfg.log_every == 0:
            if batch is not full:
                losses, _ = loss_and_grad(state, full, cfg.lam, ds, need_grad=False, dtype=cfg.dtype)
            state.history.append((it, *losses, lr))
            if progress:
                progress(it, losses, lr)
        state.set_flat(new_flat)
        state.adam = new_adam
        state.iteration += 1
        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            checkpoint()
    if not state.history or state.history[-1][0] != cfg.iterations:
        losses, _ = loss_and_grad(state, full, cfg.lam, ds, need_grad=False, dtype=cfg.dtype)
        state.history.append((cfg.iterations, *losses, lr_at(cfg.iterations, cfg.lr_schedule)))
    checkpoint()
    if log_path is not None:
        write_log(log_path, state.history)
    return state
