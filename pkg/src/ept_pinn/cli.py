"""Command line entry point: generate, train, evaluate, export."""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from . import forward_sim as fs
from . import network as nw
from . import trainer as tr
from .physics import CoordinateMap, PhysicsConstants

log = logging.getLogger("ept_pinn")

AXES = {"x": 0, "y": 1, "z": 2}


class CliError(Exception):
    pass


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def _parse_dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise CliError(f"--grid expects NX,NY,NZ, got '{text}'") from None
    if len(dims) != 3 or min(dims) < 3:
        raise CliError(f"--grid expects three sizes >= 3, got '{text}'")
    return dims


def _grid_over(box: CoordinateMap, dims) -> fs.Grid:
    lo, hi = box.lower, box.upper
    spacing = tuple((h - l) / (n - 1) for l, h, n in zip(lo, hi, dims))
    return fs.Grid(tuple(dims), spacing, tuple(lo))


def load_train_config(d: dict, seed: int | None = None):
    """``(field MlpConfig, eps MlpConfig, TrainConfig)`` from a config dict.

    Keys: ``field_network`` and ``eps_network`` (network options),
    ``training`` (training options).  ``seed`` seeds both networks and the
    batch sampler.
    """
    unknown = set(d) - {"field_network", "eps_network", "training", "format_version"}
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    fc = nw.MlpConfig.from_dict(d.get("field_network", {}))
    ec = nw.MlpConfig.from_dict(d.get("eps_network", {}))
    t = dict(d.get("training", {}))
    if seed is not None:
        t.update(field_seed=seed, eps_seed=seed + 1, batch_seed=seed)
    return fc, ec, tr.TrainConfig.from_dict(t)


def cmd_generate(args) -> None:
    cfg = _read_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    ds = fs.generate(fs.GenerateConfig.from_dict(cfg))
    fs.save_dataset(ds, args.out)
    log.info("wrote %s (%d interior voxels, %d available)", args.out,
             ds.interior_mask.sum(), ds.availability_mask.sum())


def cmd_train(args) -> None:
    ds = fs.load_dataset(args.data)
    fc, ec, cfg = load_train_config(_read_json(args.config), args.seed)
    state = None
    if args.resume:
        state, _ = tr.load_checkpoint(args.resume)
        fc, ec = state.field.config, state.eps.config

    def progress(it, losses, lr):
        log.info("it %d  total %.4e  data %.4e  residual %.4e  lr %.0e", it, *losses, lr)

    tr.train(ds, fc, ec, cfg, state=state, checkpoint_path=args.out, log_path=args.log,
             progress=progress if args.verbose else None)
    log.info("wrote %s", args.out)


def cmd_evaluate(args) -> None:
    ds = fs.load_dataset(args.data)
    nets, _, _ = nw.load_model(args.model)
    grid = _grid_over(ds.coordinate_map, _parse_dims(args.grid)) if args.grid else None
    rep = ev.evaluate(nets["field"], nets["eps"], ds, grid=grid,
                      per_slice_axis=AXES[args.slices] if args.slices else None)
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat() if args.timestamp else None
    Path(args.report).write_text(rep.to_json(stamp))
    log.info("PNAE  B1 %.3f%%  eps_r %.3f%%  sigma %.3f%%", rep.pnae_b1, rep.pnae_eps, rep.pnae_sigma)


def cmd_export(args) -> None:
    nets, header, _ = nw.load_model(args.model)
    try:
        cmap = CoordinateMap.from_dict(header["coordinate_map"])
        k = PhysicsConstants.from_dict(header["constants"])
        grid = fs.Grid.from_dict(header["grid"])
    except KeyError as exc:
        raise CliError(f"{args.model}: model lacks {exc} metadata") from None
    if args.grid:
        grid = _grid_over(cmap, _parse_dims(args.grid))
    maps = ev.sample_networks(nets["field"], nets["eps"], grid, cmap, k, header.get("field_scale", 1.0))
    values = {"b1": maps.b1, "eps": maps.eps_r, "sigma": maps.sigma}[args.map]
    try:
        ev.export_slice(values, grid, AXES[args.axis], args.index, args.out, part=args.part)
    except IndexError as exc:
        raise CliError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ept-pinn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesise a dataset")
    g.add_argument("--config", help="JSON generation options")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train both networks")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON network/training options")
    t.add_argument("--out", required=True, help="model/checkpoint file")
    t.add_argument("--log", help="CSV loss log")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="PNAE report")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--grid", help="sample the networks on an NX,NY,NZ grid over the same box")
    e.add_argument("--report", required=True)
    e.add_argument("--slices", choices=sorted(AXES), help="add a per-slice breakdown along this axis")
    e.add_argument("--timestamp", action="store_true", help="include a UTC timestamp in the report")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export", help="write one slice of a reconstructed map as CSV")
    x.add_argument("--model", required=True)
    x.add_argument("--map", choices=("b1", "eps", "sigma"), required=True)
    x.add_argument("--axis", choices=sorted(AXES), required=True)
    x.add_argument("--index", type=int, required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--part", choices=("abs", "re", "im", "phase"), default="abs")
    x.add_argument("--grid", help="NX,NY,NZ sampling grid (default: training grid)")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CliError, ValueError, OSError, tr.TrainingError) as exc:
        print(f"ept-pinn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
