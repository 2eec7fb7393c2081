"""Command line entry point: ``blindvr {simulate,train-dac,train-cfc,recover,evaluate}``.

Every failure exits non-zero with one line on stderr::

    error reason=<code> detail=<text>
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..sideinfo import SidecarError, parse_sidecar
from ..videodata import (
    ClipDataset,
    VideoFormatError,
    load_masks,
    load_video,
    make_synthetic_records,
    save_masks,
    save_video,
    write_record,
)
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, apply_overrides, load_config, preset_config
from .evaluate import evaluate, recover, report_table, write_report
from .training import TrainingError, load_completion, load_detector, train_cfc, train_dac


class CLIError(Exception):
    def __init__(self, reason: str, detail: str, code: int = 2):
        super().__init__(detail)
        self.reason, self.detail, self.code = reason, detail, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blindvr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_required=False):
        sp.add_argument("--config", help="YAML run config (may name a preset)")
        sp.add_argument("--preset", choices=["desk", "overfit", "paper"])
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int, required=seed_required)

    sp = sub.add_parser("simulate", help="write a synthetic corrupted dataset")
    common(sp, seed_required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train-dac", help="train the corruption detector")
    common(sp, seed_required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("train-cfc", help="train feature completion on a frozen detector")
    common(sp, seed_required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--dac", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("recover", help="recover one video directory")
    sp.add_argument("--dac", required=True)
    sp.add_argument("--cfc")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--sidecar", required=True)
    sp.add_argument("--masks", help="oracle masks; omit for blind recovery")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("evaluate", help="blind / oracle benchmark over a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--dac", help="detector checkpoint (required for blind mode)")
    sp.add_argument("--cfc", help="completion checkpoint; omitted means identity recovery")
    sp.add_argument("--mode", choices=["oracle", "blind", "both"], default="both")
    sp.add_argument("--out")
    return p


def _config(args, stage: str) -> RunConfig:
    cfg = load_config(args.config) if args.config else preset_config(args.preset)
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset")
    cfg = apply_overrides(cfg, args.overrides)
    cfg.stage = stage
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _dataset(path):
    try:
        return ClipDataset(path)
    except FileNotFoundError as exc:
        raise CLIError("missing-data", str(exc)) from exc


def _run(args) -> dict:
    if args.command == "simulate":
        cfg = _config(args, "simulate")
        sim = cfg.simulation
        records = make_synthetic_records(cfg.seed, sim.n_clips, sim.length, cfg.height, cfg.width,
                                         sim.kinds, sim.area_fraction, sim.residual_retention)
        for rec in records:
            write_record(args.out, rec)
        return {"clips": len(records), "out": args.out}

    if args.command == "train-dac":
        cfg = _config(args, "train_dac")
        res = train_dac(cfg, _dataset(args.data), out=args.out, resume=args.resume, steps=args.steps)
        return {"checkpoint": args.out, "steps": res.checkpoint.step, "final_loss": res.losses[-1] if res.losses else None}

    if args.command == "train-cfc":
        cfg = _config(args, "train_cfc")
        res = train_cfc(cfg, _dataset(args.data), args.dac, out=args.out, resume=args.resume, steps=args.steps)
        return {"checkpoint": args.out, "steps": res.checkpoint.step, "final_loss": res.losses[-1] if res.losses else None}

    if args.command == "recover":
        dac, cfg = load_detector(args.dac)
        cfc = load_completion(args.cfc)[0] if args.cfc else None
        frames = load_video(args.frames)
        side = parse_sidecar(args.sidecar)
        masks = load_masks(args.masks) if args.masks else None
        out, used = recover(frames, side, dac, cfc, masks, cfg.n_local, cfg.n_nonlocal)
        save_video(Path(args.out) / "frames", out)
        save_masks(Path(args.out) / "masks", used)
        return {"frames": len(out), "out": args.out}

    if args.command == "evaluate":
        modes = ("oracle", "blind") if args.mode == "both" else (args.mode,)
        if "blind" in modes and not args.dac:
            raise CLIError("missing-checkpoint", "blind mode needs --dac")
        if not args.dac:
            raise CLIError("missing-checkpoint", "evaluation needs --dac for side-information features")
        dac, cfg = load_detector(args.dac)
        cfc = load_completion(args.cfc)[0] if args.cfc else None
        report = evaluate(_dataset(args.data), dac, cfc, modes, cfg.n_local, cfg.n_nonlocal)
        if args.out:
            write_report(args.out, report)
        print(report_table(report))
        return {"summary": report["summary"]}
    raise CLIError("usage", f"unknown command {args.command}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = _run(args)
    except CLIError as exc:
        return _fail(exc.reason, exc.detail, exc.code)
    except (CheckpointError, TrainingError) as exc:
        return _fail(exc.reason, exc.detail)
    except ConfigError as exc:
        return _fail("config", str(exc))
    except (VideoFormatError, SidecarError) as exc:
        return _fail("bad-input", str(exc))
    except FileNotFoundError as exc:
        return _fail("missing-file", str(exc))
    print(json.dumps(result, sort_keys=True))
    return 0


def _fail(reason: str, detail: str, code: int = 2) -> int:
    detail = " ".join(str(detail).split())
    print(f"error reason={reason} detail={json.dumps(detail)}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
