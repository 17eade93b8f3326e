"""Command-line entry point.

Subcommands: convert, realign, rescale, augment, render, stats, ipi-check,
train-sim. Exit codes: 0 success, 1 usage or configuration error, 2 data or
schema error, 3 numerical failure. Diagnostics go to stderr; data goes to
files or stdout.

Stochastic subcommands require --seed, and the same invocation with the
same seed produces byte-identical outputs on any platform. Configuration
can be overridden with repeated ``-c key=value`` flags (dotted keys reach
nested sections, e.g. ``-c sampler.p_ti2v=0.2``) or a ``--config`` JSON
file; explicit flags win over both.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint_file, save_checkpoint_file
from .epi import (
    AnchorPool,
    EpiConfig,
    apply_rescale,
    epi_transform,
    plan_from_json,
    plan_to_json,
    ratio_histogram,
    realign,
    record_to_json,
    sample_rescale_plan,
)
from .errors import DataError, NumericalError, PosekitError, SchemaError, UsageError
from .ipi import IpiConfig, grad_check, init_ipi_params
from .pose_io import CanvasSpec, encode_ppm, parse_pose_json, render_frame, write_pose_json
from .seeding import derive_rng, make_rng
from .skeleton import PoseSequence, from_coco_wholebody, validate_sequence
from .trainsim import TrainSimConfig, partition_from_blocks, run_sim


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def _load_sequence(path: str, strict: bool) -> PoseSequence:
    return parse_pose_json(_read_bytes(path), strict=strict)


def _write_bytes(path: str, data: bytes) -> None:
    Path(path).write_bytes(data)


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise UsageError(f"override {item!r} is not of the form key=value")
    key, _, raw = item.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _merge_config(args) -> dict:
    merged: dict = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(_read_bytes(args.config))
        except json.JSONDecodeError as e:
            raise SchemaError(f"config file is not valid JSON: {e.msg}") from e
        if not isinstance(doc, dict):
            raise SchemaError("config file must hold a JSON object")
        merged.update(doc)
    for item in getattr(args, "set", None) or []:
        key, value = _parse_override(item)
        node = merged
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return merged


def _dataclass_from_dict(cls, data: dict, aliases: dict[str, str] | None = None):
    aliases = aliases or {}
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        if name not in fields:
            raise UsageError(f"unknown {cls.__name__} option: {key!r}")
        kwargs[name] = value
    return cls(**kwargs)


def _epi_config(args, extra: dict | None = None) -> EpiConfig:
    data = _merge_config(args)
    data.update(extra or {})
    return _dataclass_from_dict(EpiConfig, data, aliases={"lambda": "lambda_"})


def _trainsim_config_from_dict(data: dict) -> TrainSimConfig:
    from .trainsim import TaskSamplerConfig

    sections = {
        "ipi": (IpiConfig, None),
        "sampler": (TaskSamplerConfig, None),
        "epi": (EpiConfig, {"lambda": "lambda_"}),
    }
    for section, (cls, aliases) in sections.items():
        if section in data and isinstance(data[section], dict):
            data[section] = _dataclass_from_dict(cls, data[section], aliases)
    return _dataclass_from_dict(TrainSimConfig, data)


def _emit(data: bytes, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    else:
        _write_bytes(out, data)


def _json_bytes(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_convert(args) -> int:
    try:
        doc = json.loads(_read_bytes(args.input).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"convert input is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "frames" not in doc:
        raise SchemaError("convert input must be an object with a frames list")
    frames = [from_coco_wholebody(raw) for raw in doc["frames"]]
    seq = PoseSequence(
        tuple(frames),
        int(doc.get("width", 0) or 0) or _infer_canvas(frames)[0],
        int(doc.get("height", 0) or 0) or _infer_canvas(frames)[1],
        float(doc.get("fps", 30.0)),
    )
    for violation in validate_sequence(seq):
        print(f"warning: {violation}", file=sys.stderr)
    _emit(write_pose_json(seq), args.out)
    return 0


def _infer_canvas(frames) -> tuple[int, int]:
    xs = max(float(f.body[:, 0].max()) for f in frames)
    ys = max(float(f.body[:, 1].max()) for f in frames)
    return max(16, int(xs) + 1), max(16, int(ys) + 1)


def _cmd_realign(args) -> int:
    seq = _load_sequence(args.input, args.strict)
    anchors = _load_sequence(args.anchor, args.strict)
    if not (0 <= args.anchor_index < len(anchors.frames)):
        raise UsageError(f"anchor index {args.anchor_index} out of range")
    cfg = _epi_config(args, {"ref_frame_policy": args.policy} if args.policy else None)
    out = realign(seq, anchors.frames[args.anchor_index], cfg)
    _emit(write_pose_json(out), args.out)
    return 0


def _cmd_rescale(args) -> int:
    seq = _load_sequence(args.input, args.strict)
    cfg = _epi_config(args)
    if args.plan:
        plan = plan_from_json(_read_bytes(args.plan))
    else:
        if args.seed is None:
            raise UsageError("rescale --sample requires --seed")
        plan = sample_rescale_plan(derive_rng(args.seed, 0), cfg)
        print(f"sampled plan: {plan_to_json(plan).decode().strip()}", file=sys.stderr)
    out, warnings = apply_rescale(seq, plan)
    for message in warnings:
        print(f"warning: {message}", file=sys.stderr)
    _emit(write_pose_json(out), args.out)
    return 0


def _augment_one(seq: PoseSequence, pool: AnchorPool, cfg: EpiConfig,
                 seed: int, item: int, trial: int):
    rng = derive_rng(seed, item, trial)
    out, record = epi_transform(seq, pool, cfg, rng)
    return write_pose_json(out), record_to_json(record)


def _cmd_augment(args) -> int:
    pool_seq = _load_sequence(args.pool, args.strict)
    pool = AnchorPool(pool_seq.frames)
    extra = {}
    if args.lambda_ is not None:
        extra["lambda_"] = args.lambda_
    if args.p_rescale is not None:
        extra["p_rescale"] = args.p_rescale
    cfg = _epi_config(args, extra)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for item, path in enumerate(args.inputs):
        seq = _load_sequence(path, args.strict)
        for trial in range(args.trials):
            jobs.append((item, trial, Path(path).stem, seq))

    def work(job):
        item, trial, stem, seq = job
        return _augment_one(seq, pool, cfg, args.seed, item, trial)

    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool_exec:
            results = list(pool_exec.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    for (item, trial, stem, _), (seq_bytes, record_bytes) in zip(jobs, results):
        base = out_dir / f"{stem}.t{trial:04d}"
        _write_bytes(str(base) + ".json", seq_bytes)
        _write_bytes(str(base) + ".record.json", record_bytes)
    print(f"augmented {len(args.inputs)} file(s) x {args.trials} trial(s)", file=sys.stderr)
    return 0


def _cmd_render(args) -> int:
    seq = _load_sequence(args.input, args.strict)
    spec = CanvasSpec(
        width=args.width or seq.width,
        height=args.height or seq.height,
        line_thickness=args.thickness,
        joint_radius=args.radius,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(idx):
        return encode_ppm(render_frame(seq.frames[idx], spec))

    indices = range(len(seq.frames))
    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool_exec:
            images = list(pool_exec.map(work, indices))
    else:
        images = [work(i) for i in indices]
    for idx, data in zip(indices, images):
        _write_bytes(str(out_dir / f"frame_{idx:05d}.ppm"), data)
    print(f"rendered {len(seq.frames)} frame(s) to {out_dir}", file=sys.stderr)
    return 0


def _cmd_stats(args) -> int:
    pool_seq = _load_sequence(args.pool, args.strict)
    pool = AnchorPool(pool_seq.frames)
    driving = [_load_sequence(path, args.strict) for path in args.driving]
    cfg = _epi_config(args)
    hist = ratio_histogram(pool, driving, args.trials, derive_rng(args.seed, 0), cfg)
    if args.json == "-":
        _emit(_json_bytes(hist.to_json_dict()), None)
    else:
        sys.stdout.write(hist.format_table())
        if args.json:
            _write_bytes(args.json, _json_bytes(hist.to_json_dict()))
    return 0


def _cmd_ipi_check(args) -> int:
    data = _merge_config(args)
    cfg = _dataclass_from_dict(IpiConfig, data)
    params = init_ipi_params(cfg, derive_rng(args.seed, 0))
    report = grad_check(params, cfg, eps=args.eps,
                        entries_per_block=args.entries, seed=args.seed)
    doc = {
        "max_rel_error": report.max_rel_error,
        "eps": report.eps,
        "entries_per_block": report.entries_per_block,
        "per_block": dict(sorted(report.per_block.items())),
        "tolerance": args.tol,
    }
    _emit(_json_bytes(doc), args.out)
    print(f"gradient check: max relative error {report.max_rel_error:.3e} "
          f"(tolerance {args.tol:.1e})", file=sys.stderr)
    if not (report.max_rel_error <= args.tol):
        raise NumericalError(
            f"gradient check failed: {report.max_rel_error:.3e} > {args.tol:.1e}"
        )
    return 0


def _cmd_train_sim(args) -> int:
    data = _merge_config(args)
    sampler = data.setdefault("sampler", {})
    if isinstance(sampler, dict):
        if args.p_ti2v is not None:
            sampler["p_ti2v"] = args.p_ti2v
        sampler.setdefault("seed", args.seed)
    cfg = _trainsim_config_from_dict(data)
    initial = None
    if args.resume:
        initial = partition_from_blocks(cfg, load_checkpoint_file(args.resume))
    result = run_sim(cfg, args.steps, make_rng(args.seed),
                     initial_partition=initial, capture_state=bool(args.save_state))
    if args.save_state:
        report, state = result
        save_checkpoint_file(args.save_state, state.partition.named_blocks())
    else:
        report = result
    _emit(_json_bytes(report.to_json_dict()), args.out)
    return 0


# ---------------------------------------------------------------------------
# Argument wiring


def _add_common(sub, *, strict=True, config=True):
    if strict:
        sub.add_argument("--strict", action="store_true",
                         help="reject unknown fields when parsing pose files")
    if config:
        sub.add_argument("--config", help="JSON file with config values")
        sub.add_argument("-c", "--set", action="append", metavar="KEY=VALUE",
                         help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="posekit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="COCO-WholeBody keypoints to canonical pose JSON")
    p.add_argument("input")
    p.add_argument("-o", "--out", help="output path (default stdout)")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("realign", help="re-target a sequence onto an anchor's proportions")
    p.add_argument("input")
    p.add_argument("--anchor", required=True, help="pose file holding anchor frames")
    p.add_argument("--anchor-index", type=int, default=0)
    p.add_argument("--policy", choices=("first", "median"))
    p.add_argument("-o", "--out")
    _add_common(p)
    p.set_defaults(func=_cmd_realign)

    p = sub.add_parser("rescale", help="apply or sample a rescale plan")
    p.add_argument("input")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--plan", help="JSON plan file")
    group.add_argument("--sample", action="store_true", help="sample a plan (needs --seed)")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out")
    _add_common(p)
    p.set_defaults(func=_cmd_rescale)

    p = sub.add_parser("augment", help="batch stochastic transform with side-car records")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--pool", required=True, help="pose file whose frames form the anchor pool")
    p.add_argument("--lambda", dest="lambda_", type=float,
                   help="transform probability (default from config)")
    p.add_argument("--p-rescale", type=float)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("render", help="rasterize frames to binary PPM images")
    p.add_argument("input")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--thickness", type=int, default=4)
    p.add_argument("--radius", type=int, default=4)
    p.add_argument("--jobs", type=int, default=1)
    _add_common(p, config=False)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("stats", help="rescaling-ratio histogram over a pool")
    p.add_argument("--pool", required=True)
    p.add_argument("--driving", nargs="+", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--json", help="also write JSON here ('-' for JSON on stdout)")
    _add_common(p)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("ipi-check", help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--entries", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("-o", "--out")
    _add_common(p, strict=False)
    p.set_defaults(func=_cmd_ipi_check)

    p = sub.add_parser("train-sim", help="run the multi-task training simulator")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--p-ti2v", type=float)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--save-state", help="write final parameters to this checkpoint")
    p.add_argument("--resume", help="load initial parameters from this checkpoint")
    p.add_argument("-o", "--out")
    _add_common(p, strict=False)
    p.set_defaults(func=_cmd_train_sim)

    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except PosekitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
