"""Command-line entry point.

Subcommands: ``gen-phantom``, ``train``, ``infer``, ``eval``.  Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numerical failure.

``--threads`` is applied to the BLAS thread-count environment before numpy
loads; values above 1 are allowed only where determinism is preserved
(the kernels themselves stay single-threaded either way).
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _build_parser():
    ap = argparse.ArgumentParser(prog="mri2ct",
                                 description="3D MRI-to-CT synthesis pipeline")
    ap.add_argument("--threads", type=int, default=1,
                    help="BLAS thread count (default 1, deterministic)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="write a paired synthetic phantom")
    p.add_argument("--config", required=True, help="phantom spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override spec seed")

    p = sub.add_parser("train", help="train on one aligned MRI/CT pair")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--seed", type=int, default=None, help="override train seed")

    p = sub.add_parser("infer", help="synthesize a CT volume from an MRI volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mri", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", default=None, help="d,h,w window stride")
    p.add_argument("--patch", default=None, help="d,h,w window extents")

    p = sub.add_parser("eval", help="masked MAE/SSIM/PSNR and Dice report")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--body-mask", default=None,
                   help="RVOL mask; derived from the reference CT if omitted")
    p.add_argument("--structures", default=None,
                   help="directory of <name>_pred.rvol / <name>_ref.rvol mask pairs")
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    return ap


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)

    from .errors import ConfigError, DataError, NumericsError

    try:
        if args.command == "gen-phantom":
            return _cmd_gen_phantom(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "infer":
            return _cmd_infer(args)
        if args.command == "eval":
            return _cmd_eval(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        snap_path = "numerics_failure.json"
        try:
            with open(snap_path, "w", encoding="utf-8") as fh:
                json.dump(exc.snapshot, fh, sort_keys=True, indent=2)
            print(f"diagnostic snapshot written to {snap_path}", file=sys.stderr)
        except OSError:
            pass
        return 3
    return 0


def _load_json(path, what):
    from .errors import ConfigError, DataError
    if not os.path.exists(path):
        raise DataError(f"{what} file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} is not valid JSON ({path}): {exc}") from exc


def _reject_unknown(d, allowed, where):
    from .errors import ConfigError
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")


def _cmd_gen_phantom(args):
    from .volume import (make_phantom_pair, phantom_spec_from_dict,
                         phantom_spec_to_dict, write_rvol)

    raw = _load_json(args.config, "phantom spec")
    spec = phantom_spec_from_dict(raw, seed_override=args.seed)

    mri, ct = make_phantom_pair(spec)
    os.makedirs(args.out, exist_ok=True)
    mri_path = os.path.join(args.out, "phantom_mri.rvol")
    ct_path = os.path.join(args.out, "phantom_ct.rvol")
    write_rvol(mri_path, mri)
    write_rvol(ct_path, ct)
    manifest = {
        "spec": phantom_spec_to_dict(spec),
        "files": {"mri": "phantom_mri.rvol", "ct": "phantom_ct.rvol"},
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    print(f"wrote {mri_path} and {ct_path}")
    return 0


_TRAIN_KEYS = ("data", "out", "seed", "generator", "discriminator", "train",
               "weights", "resume")


def _cmd_train(args):
    from .discriminator import DiscriminatorConfig
    from .errors import ConfigError, DataError
    from .generator import GeneratorConfig
    from .losses import LossWeights
    from .train import TrainConfig, train
    from .volume import read_rvol

    raw = _load_json(args.config, "run config")
    _reject_unknown(raw, _TRAIN_KEYS, "run config")
    data = raw.get("data") or {}
    _reject_unknown(data, ("mri", "ct"), "run config 'data'")
    if "mri" not in data or "ct" not in data:
        raise ConfigError("run config needs data.mri and data.ct paths")
    for key in ("mri", "ct"):
        if not os.path.exists(data[key]):
            raise DataError(f"dataset path not found: {data[key]}")
    resume = raw.get("resume")
    if resume is not None and not os.path.exists(resume):
        raise DataError(f"resume checkpoint not found: {resume}")

    out_dir = args.out or raw.get("out") or "."
    try:
        gen_cfg = GeneratorConfig.from_dict(raw.get("generator") or {})
        disc_cfg = DiscriminatorConfig.from_dict(raw.get("discriminator") or {})
        tdict = dict(raw.get("train") or {})
        if args.seed is not None:
            tdict["seed"] = args.seed
        elif "seed" in raw:
            tdict.setdefault("seed", raw["seed"])
        tcfg = TrainConfig.from_dict(tdict)
        weights = LossWeights.from_dict(raw.get("weights") or {})
    except TypeError as exc:
        raise ConfigError(f"run config: {exc}") from exc

    mri = read_rvol(data["mri"])
    ct = read_rvol(data["ct"])
    final = train(mri, ct, gen_cfg, disc_cfg, tcfg, weights=weights,
                  out_dir=out_dir, resume=resume)
    print(f"final checkpoint: {final}")
    return 0


def _parse_triplet(text, what):
    from .errors import ConfigError
    try:
        parts = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{what} must be d,h,w integers") from exc
    if len(parts) != 3 or min(parts) < 1:
        raise ConfigError(f"{what} must be 3 positive integers")
    return parts


def _cmd_infer(args):
    from .errors import DataError
    from .inference import synthesize_to_hu

    for path in (args.ckpt, args.mri):
        if not os.path.exists(path):
            raise DataError(f"input not found: {path}")
    stride = _parse_triplet(args.stride, "--stride") if args.stride else None
    patch = _parse_triplet(args.patch, "--patch") if args.patch else None
    synthesize_to_hu(args.mri, args.ckpt, args.out, stride=stride, patch=patch)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args):
    from .errors import DataError
    from .metrics import evaluate
    from .volume import body_mask, read_rvol

    for path in (args.pred, args.ref):
        if not os.path.exists(path):
            raise DataError(f"input not found: {path}")
    pred = read_rvol(args.pred)
    ref = read_rvol(args.ref)
    body = read_rvol(args.body_mask) if args.body_mask else body_mask(ref)

    structures = {}
    if args.structures:
        if not os.path.isdir(args.structures):
            raise DataError(f"structure mask directory not found: {args.structures}")
        for name in sorted(os.listdir(args.structures)):
            if name.endswith("_pred.rvol"):
                stem = name[:-len("_pred.rvol")]
                ref_name = f"{stem}_ref.rvol"
                ref_path = os.path.join(args.structures, ref_name)
                if not os.path.exists(ref_path):
                    raise DataError(f"missing {ref_name} for structure {stem!r}")
                structures[stem] = (read_rvol(os.path.join(args.structures, name)),
                                    read_rvol(ref_path))
    report = evaluate(pred, ref, body, structure_masks=structures)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
