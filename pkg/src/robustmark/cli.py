"""Command-line entry point: ``robustmark <verb> ...``.

Exit codes: 0 success, 1 usage, 2 data, 3 training failure, 4 checkpoint format/version.
Failures print one JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys
from pathlib import Path

import torch

from .config import (
    TRAINING_GRIDS,
    Config,
    apply_overrides,
    attack_to_dict,
    config_from_dict,
    load_config,
    save_config,
)
from .core import AttackSpec, ConfigError, IngestError, SeverityGrid, WatermarkError, make_rng
from .evaluation import (
    compare_models,
    format_sweep_table,
    plot_sweeps,
    psnr,
    quick_eval,
    read_sweep_table,
    severity_sweep,
)
from .ingest import load_image_dataset, read_image, sample_messages, tensor_to_image
from .models import MIN_DECODE_SIZE, load_checkpoint, read_manifest
from .trainer import train

OUT_ENV = "ROBUSTMARK_OUT"
log = logging.getLogger("robustmark")


class UsageError(WatermarkError):
    exit_code = 1


def parse_attacks(text: str) -> list[AttackSpec]:
    """``crop,dropout=0.3,gaussian_blur=1:5:1`` -> attack specs.

    A bare kind takes its default training grid (and baseline intensity), ``kind=s``
    fixes the severity, ``kind=min:max:step`` sets the grid.
    """
    out = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        kind, _, arg = item.partition("=")
        try:
            if kind == "identity":
                out.append(AttackSpec("identity"))
            elif not arg:
                if kind not in TRAINING_GRIDS:
                    raise ConfigError("--attacks", f"unknown attack kind {kind!r}")
                out.append(config_from_dict({"attacks": [kind]}).attacks[0])
            elif ":" in arg:
                lo, hi, step = (float(v) for v in arg.split(":"))
                out.append(AttackSpec(kind, SeverityGrid(lo, hi, step)))
            else:
                out.append(AttackSpec(kind, fixed=float(arg)))
        except ValueError as e:
            if isinstance(e, WatermarkError):
                raise
            raise ConfigError("--attacks", f"cannot parse {item!r}") from None
    if not out:
        raise ConfigError("--attacks", "no attacks given")
    return out


def _seed(value) -> int:
    if value is not None:
        return value
    seed = secrets.randbits(31)
    print(f"seed: {seed}")
    return seed


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config().validate()
    overrides = {}
    if getattr(args, "attacks", None):
        overrides["attacks"] = [attack_to_dict(a) for a in parse_attacks(args.attacks)]
        if "training.subset_sizes" not in overrides and cfg.training.subset_sizes is not None:
            overrides["training.subset_sizes"] = None
    if getattr(args, "mode", None):
        overrides["training.mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        overrides["training.epochs"] = args.epochs
    if getattr(args, "limit", None) is not None:
        overrides["data.limit"] = args.limit
    return apply_overrides(cfg, overrides) if overrides else cfg


def _dataset(path, split, cfg: Config, limit=None):
    if path is None:
        raise UsageError("--data is required (or data.train_dir / data.test_dir in the config)")
    if not Path(path).exists():
        raise IngestError(f"data path not found: {path}")
    return load_image_dataset(path, split, cfg.data.image_size, limit)


def _checkpoint(path):
    if not Path(path).is_file():
        raise IngestError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = _seed(args.seed if args.seed is not None else (cfg.training.seed if args.config else None))
    cfg = apply_overrides(cfg, {"training.seed": seed})
    out = Path(args.out) if args.out else _out_root() / "train"
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    if cfg.training.epochs == 0:
        train_set = None
    else:
        train_set = _dataset(args.data or cfg.data.train_dir, "train", cfg, cfg.data.limit)
    test_dir = args.test_data or cfg.data.test_dir
    eval_set = _dataset(test_dir, "test", cfg, cfg.data.limit) if test_dir else None
    result = train(cfg, train_set, None, out_dir=out, log_every=args.log_every)
    summary = {"steps": len(result.history), "checkpoint": str(out / "final.npz"), "seed": seed}
    if result.history:
        last = result.history[-1]
        summary.update(objective=last.objective, decoder_loss=last.decoder_loss)
    if eval_set is not None:
        summary["test"] = quick_eval(result.bundle, eval_set, cfg.eval.seed, cfg.eval.batch_size)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    bundle = _checkpoint(args.checkpoint)
    cfg = _config(args)
    dataset = _dataset(args.data, "test", cfg, args.limit)
    seed = _seed(args.seed if args.seed is not None else cfg.eval.seed)
    result = quick_eval(bundle, dataset, seed, cfg.eval.batch_size)
    result.update(n=len(dataset), seed=seed)
    text = json.dumps(result, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _trained_severities(bundle) -> dict:
    snap = bundle.config_snapshot or {}
    mode = snap.get("training", {}).get("mode")
    out = {}
    for raw in snap.get("attacks", []):
        kind = raw["kind"]
        if kind == "identity":
            continue
        spec = config_from_dict({"attacks": [raw]}).attacks[0]
        out[kind] = [spec.fixed_severity()] if mode == "fixed_severity" else spec.search_values()
    return out


def cmd_sweep(args) -> int:
    bundle = _checkpoint(args.checkpoint)
    cfg = _config(args)
    dataset = _dataset(args.data, "test", cfg, args.limit)
    attack_list = [a for a in cfg.attacks if a.kind != "identity"]
    if cfg.eval.extend_grids and not args.no_extend:
        attack_list = [AttackSpec(a.kind, a.grid.extended(a.kind)) if a.grid else a for a in attack_list]
    seed = _seed(args.seed if args.seed is not None else cfg.eval.seed)
    table = severity_sweep(
        bundle, dataset, attack_list, seed,
        true_jpeg=args.true_jpeg or cfg.eval.true_jpeg, batch_size=cfg.eval.batch_size,
        model_id=args.model_id or Path(args.checkpoint).stem,
        trained_severities=_trained_severities(bundle),
    )
    out = Path(args.out) if args.out else _out_root() / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_sweep_table(table))
    meta = {"model_id": table.model_id, "seed": seed, "psnr_mean": table.psnr_mean,
            "trained_severities": table.trained_severities,
            "severity_conventions": {"crop": "retained area fraction", "cropout": "retained area fraction",
                                     "dropout": "keep probability", "gaussian_blur": "sigma (pixels)",
                                     "jpeg": "quality"},
            "grids_extended": bool(cfg.eval.extend_grids and not args.no_extend)}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if args.plot_dir:
        plot_sweeps([table], args.plot_dir)
    print(f"wrote {out} ({len(table.rows)} rows)")
    return 0


def cmd_compare(args) -> int:
    tables = []
    for path in args.tables:
        table = read_sweep_table(path)
        meta = Path(path).with_suffix(".json")
        if meta.is_file():
            info = json.loads(meta.read_text())
            table.psnr_mean = info.get("psnr_mean", table.psnr_mean)
            table.trained_severities = info.get("trained_severities", {})
        tables.append(table)
    report = compare_models(tables)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.plot_dir:
        plot_sweeps(tables, args.plot_dir)
    print(text)
    return 0


def parse_bits(text: str, length: int) -> torch.Tensor:
    if any(c not in "01" for c in text):
        raise UsageError(f"message must contain only '0' and '1', got {text!r}")
    if len(text) != length:
        raise UsageError(f"message has {len(text)} bits, model expects {length}")
    return torch.tensor([[float(c) for c in text]])


def _read_input_image(path, size=None) -> torch.Tensor:
    if not Path(path).is_file():
        raise IngestError(f"image not found: {path}")
    try:
        return read_image(path, size)[None]
    except Exception as e:
        raise IngestError(f"cannot decode image {path}: {e}") from None


def cmd_embed(args) -> int:
    bundle = _checkpoint(args.checkpoint)
    L = bundle.arch.message_length
    if args.message:
        m = parse_bits(args.message, L)
    else:
        m = sample_messages(make_rng(_seed(args.seed)), 1, L)
    size = tuple(args.size) if args.size else None
    x = _read_input_image(args.image, size)
    if x.shape[2] < MIN_DECODE_SIZE or x.shape[3] < MIN_DECODE_SIZE:
        raise IngestError(f"image {args.image} is smaller than {MIN_DECODE_SIZE} pixels")
    with torch.no_grad():
        x_wm = bundle.encoder(x, m)
    out = Path(args.out) if args.out else _out_root() / (Path(args.image).stem + "_wm.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    tensor_to_image(x_wm[0]).save(out)
    bits = "".join(str(int(b)) for b in m[0].tolist())
    print(json.dumps({"out": str(out), "message": bits, "psnr": psnr(x, x_wm)[0].item()}))
    return 0


def cmd_extract(args) -> int:
    bundle = _checkpoint(args.checkpoint)
    x = _read_input_image(args.image)
    if x.shape[2] < MIN_DECODE_SIZE or x.shape[3] < MIN_DECODE_SIZE:
        raise IngestError(f"image {args.image} is {x.shape[2]}x{x.shape[3]}, below {MIN_DECODE_SIZE} pixels")
    with torch.no_grad():
        raw = bundle.decoder(x)[0]
    bits = "".join("1" if v >= 0.5 else "0" for v in raw.tolist())
    print(json.dumps({"bits": bits, "values": [round(v, 6) for v in raw.tolist()]}))
    return 0


def cmd_inspect(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise IngestError(f"checkpoint not found: {args.checkpoint}")
    print(json.dumps(read_manifest(args.checkpoint), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustmark", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, data=True):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if data:
            p.add_argument("--data")
            p.add_argument("--limit", type=int)
            p.add_argument("--attacks")

    p = sub.add_parser("train", help="train encoder/decoder/discriminator")
    common(p)
    p.add_argument("--test-data")
    p.add_argument("--mode", choices=["worst_case", "fixed_severity"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="no-attack bit accuracy and PSNR on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="bit accuracy over attack severity grids")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--true-jpeg", action="store_true")
    p.add_argument("--no-extend", action="store_true", help="sweep the training grids as given")
    p.add_argument("--model-id")
    p.add_argument("--plot-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="compare sweep tables")
    p.add_argument("tables", nargs="+")
    p.add_argument("--out")
    p.add_argument("--plot-dir")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("embed", help="watermark one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--message")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="decode the message of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (WatermarkError, ValueError, OSError) as e:
        code = e.exit_code if isinstance(e, WatermarkError) else 2 if isinstance(e, OSError) else 1
        record = {"error": type(e).__name__, "message": str(e), "exit_code": code}
        print(json.dumps(record), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
