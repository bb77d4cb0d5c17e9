"""``voxequiv`` command line.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence, 4 I/O
error. Worker count comes from ``VOXEQUIV_WORKERS`` (default 1).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import DivergenceError, ParseError, ShapeError, SpecError, VoxequivError
from ..mol_io import read_molecule
from ..voxelizer import read_grid, voxelize, write_grid
from .config import ConfigError, ExperimentConfig
from .experiments import build_net, grid_spec, load_dataset, run_experiment, stage
from .reporting import RunManifest, verify_checksums

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("voxequiv")


def _config(args, kind=None) -> ExperimentConfig:
    overrides = list(args.set or [])
    if kind is not None:
        overrides.append(f"experiment.kind={kind}")
    if args.output:
        overrides.append(f"experiment.output_dir={args.output}")
    if args.config:
        return ExperimentConfig.read(args.config, overrides)
    return ExperimentConfig.from_ini("", overrides)


def cmd_voxelize(args) -> int:
    cfg = _config(args)
    spec = grid_spec(cfg)
    mol = read_molecule(args.input)
    grid = voxelize(mol, spec, center=args.center)
    path = write_grid(args.out, grid)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, held = load_dataset(cfg)
    manifest = RunManifest(cfg.to_dict())
    with stage(f"train:{args.name}", out, manifest):
        _, curve, path = build_net(cfg, train, {}, out, args.name, manifest)
    (out / "config.ini").write_text(cfg.to_ini())
    manifest.write(out)
    print(path)
    for row in curve:
        log.info("epoch %d loss %.6g", row["epoch"], row["loss"])
    return EXIT_OK


def _experiment(kind):
    def run(args) -> int:
        cfg = _config(args, kind)
        out = Path(cfg.experiment.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini())
        bundle = run_experiment(cfg)
        print(json.dumps({"run_id": bundle.manifest.run_id, "output_dir": str(out)}))
        return EXIT_OK
    return run


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    bad = verify_checksums(run_dir)
    for p in sorted(run_dir.glob("*.json")):
        if p.name.endswith(".manifest.json") or p.name == "manifest.json":
            continue
        print(p.read_text())
    if bad:
        print(f"checksum mismatch: {', '.join(bad)}", file=sys.stderr)
        return EXIT_IO
    print(f"run_id {manifest['run_id']}: {len(manifest['stages'])} stages, checksums ok")
    return EXIT_OK


def cmd_inspect_grid(args) -> int:
    g = read_grid(args.grid)
    print(json.dumps({"shape": list(g.data.shape), "spec": g.spec.to_dict(), "max": float(g.data.max())}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxequiv", description="Voxel denoiser equivariance experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="INI config file")
        sp.add_argument("-o", "--output", help="output directory (overrides experiment.output_dir)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")

    sp = sub.add_parser("voxelize", help="voxelize one molecule file")
    common(sp)
    sp.add_argument("input")
    sp.add_argument("out")
    sp.add_argument("--center", action="store_true", help="move the centroid to the grid centre first")
    sp.set_defaults(func=cmd_voxelize)

    sp = sub.add_parser("train", help="train one denoiser and save a checkpoint")
    common(sp)
    sp.add_argument("--name", default="denoiser")
    sp.set_defaults(func=cmd_train)

    for name, kind, text in (("recon-equiv", "reconstruction", "reconstruction-equivariance sweep"),
                             ("generate", "generation", "rotated vs unrotated seeded generation"),
                             ("prop-predict", "property", "property prediction under rotation")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.set_defaults(func=_experiment(kind))

    sp = sub.add_parser("report", help="verify a run directory and print its summaries")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("inspect-grid", help="print the header of a grid file")
    sp.add_argument("grid")
    sp.set_defaults(func=cmd_inspect_grid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, SpecError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, ShapeError) as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO
    except VoxequivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
