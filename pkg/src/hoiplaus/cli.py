"""Command-line entry point: gen, field, eval, train-surrogate, refine, report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataset as ds
from . import metrics as mt
from .config import DEFAULT, Settings
from .field import compute_field
from .hand import skin
from .geometry import DegenerateMeshError, MeshParseError, NotWatertightError
from .refine import RefineConfig, refine_sequence
from .surrogate import LayoutError, SurrogateNet, TrainConfig, new_grasp_net, new_manip_net, train

log = logging.getLogger("hoiplaus")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_CONFIG = 5
EXIT_COMPUTE = 6


# ------------------------------------------------------------------ helpers
def _settings(args) -> Settings:
    if args.config is None:
        return Settings()
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        return Settings.from_file(path)
    except json.JSONDecodeError as exc:
        raise ds.SchemaError(f"{path}: invalid JSON: {exc}") from exc


def _override(section: dict, **flags) -> dict:
    """Flags given on the command line win over config file values."""
    out = dict(section)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _seq_files(path: Path) -> list[Path]:
    if not path.exists():
        raise FileNotFoundError(str(path))
    if path.is_dir():
        files = sorted(path.glob("*.seq.jsonl"))
        if not files:
            raise FileNotFoundError(f"{path}: no *.seq.jsonl files")
        return files
    return [path]


def _key(path: Path) -> str:
    stem = path.name[: -len(".seq.jsonl")] if path.name.endswith(".seq.jsonl") else path.stem
    for role in (".noisy", ".clean", ".refined"):
        if stem.endswith(role):
            return stem[: -len(role)]
    return stem


def _pair(a: Path, b: Path, role_a: str | None = None) -> list[tuple[Path, Path]]:
    fa = _seq_files(a)
    fb = _seq_files(b)
    if a.is_dir() and role_a:
        fa = [f for f in fa if f.name.endswith(f".{role_a}.seq.jsonl")] or fa
    if len(fa) == 1 and len(fb) == 1:
        return [(fa[0], fb[0])]
    by_key = {_key(f): f for f in fb}
    pairs = []
    for f in fa:
        if _key(f) not in by_key:
            raise FileNotFoundError(f"no reference sequence for {f}")
        pairs.append((f, by_key[_key(f)]))
    return pairs


def _object_for(seq: ds.Sequence, seq_path: Path, override: str | None):
    if override:
        return ds.resolve_object(override if override.startswith("builtin:") else str(Path(override)))
    return ds.resolve_object(seq.object_ref, base=seq_path.parent)


def _map(fn, items, threads: int):
    return ds._map(fn, items, max(1, int(threads)))


def _add_common(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--config", help="JSON config file with optional sections global/gen/train/refine")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker processes (default: logical cores); results do not depend on it")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


# ---------------------------------------------------------------- commands
def cmd_gen(args) -> int:
    st = _settings(args)
    gen = ds.GenConfig.from_dict(_override(st.section("gen"), pairs=args.pairs,
                                           eval_sequences=args.eval_sequences, interp_steps=args.interp_steps))
    man = ds.build_dataset(gen, args.seed, args.out, st.globals, threads=args.threads)
    c = man["counts"]
    print(f"wrote {c['frames']} labeled frames from {c['pairs']} pairs ({c['failed']} failed), "
          f"{c['sequences']} evaluation sequences to {args.out}")
    return EXIT_OK


def cmd_field(args) -> int:
    st = _settings(args)
    cfg = st.globals
    path = Path(args.inp)
    seq = ds.read_sequence(path)
    obj = _object_for(seq, path, args.object)
    samples = obj.sample_surface(cfg.n_samples, args.seed)
    frames = range(len(seq)) if args.frame is None else [args.frame]
    lines = [ds.dumps({"type": "header", "format": "hoiplaus.field", "version": ds.FORMAT_VERSION,
                       "object_ref": seq.object_ref, "sample_seed": args.seed, "n_samples": cfg.n_samples,
                       "config": cfg.to_dict()})]
    for i in frames:
        if not 0 <= i < len(seq):
            raise ValueError(f"frame {i} out of range for {len(seq)} frames")
        hm = skin(seq.poses[i])
        fld = compute_field(hm, samples.transformed(seq.object_rot[i], seq.object_trans[i]),
                            cfg.ray_cutoff, cfg.ray_offset)
        contact = int(((fld.m == 1) & (np.abs(fld.d) <= cfg.c_contact)).sum())
        lines.append(ds.dumps({"type": "frame", "i": i, "contacts": contact, **ds.sparse_field(fld)}))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} field frames to {out}")
    return EXIT_OK


def _eval_pair(job):
    path, ref_path, obj_override, cfg_dict, seed, with_iv = job
    cfg = type(DEFAULT).from_dict(cfg_dict)
    seq, ref = ds.read_sequence(path), ds.read_sequence(ref_path)
    obj = _object_for(ref, ref_path, obj_override)
    traj = ref.trajectory(cfg.mass, cfg.gravity)
    return mt.evaluate_sequence(seq.poses, ref.poses, obj, traj, cfg, seed, with_iv)


FRAME_FIELDS = ("sequence", "frame", "mpjpe", "mpvpe", "contact_iou", "iv", "pd", "fe", "me", "plausible")


def _frame_rows(name: str, frames, arm: str | None = None):
    for i, f in enumerate(frames):
        row = {"sequence": name, "frame": i, **{k: v for k, v in f.as_dict().items()}}
        row["plausible"] = int(row["plausible"])
        if arm:
            row["arm"] = arm
        yield {k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()}


def format_table(columns: dict[str, dict]) -> str:
    names = list(columns)
    header = "| Metric | " + " | ".join(names) + " |"
    lines = [header, "|" + "---|" * (len(names) + 1)]
    for key, label in mt.SUMMARY_ROWS:
        cells = [f"{columns[n][key]:.4g}" for n in names]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def format_arrow_table(before: dict, after: dict) -> str:
    lines = ["| Metric | Before -> After |", "|---|---|"]
    for key, label in mt.SUMMARY_ROWS:
        lines.append(f"| {label} | {before[key]:.4g} -> {after[key]:.4g} |")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    st = _settings(args)
    pairs = _pair(Path(args.inp), Path(args.ref))
    jobs = [(p, r, args.object, st.globals.to_dict(), args.seed, not args.no_iv) for p, r in pairs]
    results = _map(_eval_pair, jobs, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_frames = []
    with (out / "frames.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FRAME_FIELDS)
        w.writeheader()
        for (p, _), frames in zip(pairs, results):
            all_frames += frames
            w.writerows(_frame_rows(_key(p), frames))
    summary = mt.summarize(all_frames)
    (out / "summary.json").write_text(json.dumps(
        {"summary": summary, "frames": len(all_frames), "config": st.globals.to_dict(), "seed": args.seed},
        indent=2, sort_keys=True) + "\n")
    print(format_table({"value": summary}))
    return EXIT_OK


def cmd_train(args) -> int:
    st = _settings(args)
    tcfg = TrainConfig.from_dict(_override(st.section("train"), epochs=args.epochs, lr=args.lr,
                                           batch_size=args.batch_size, seed=args.seed,
                                           alpha_soft=0.0 if args.hard_only else None))
    data = Path(args.data)
    records = ds.read_labels(data)
    if not records:
        raise ValueError("empty dataset")
    n_obj = st.section("gen").get("surrogate_object_points", 256)
    sets = ds.training_sets(records, args.kind, st.globals.n_samples, n_obj)
    if len(sets["train"]) == 0:
        raise ValueError("dataset has no training split")
    net = new_grasp_net(args.seed, n_obj) if args.kind == "grasp" else new_manip_net(args.seed, st.globals.n_samples)
    res = train(net, sets["train"], tcfg, sets["val"], sets["test"])
    res.net.meta.update(history=res.history, config=st.globals.to_dict(), data=str(data.name))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.net.save(out)
    print(f"{args.kind} network: held-out F-score {res.f_score:.4f} "
          f"(train {len(sets['train'])}, val {len(sets['val'])}, test {len(sets['test'])}) -> {out}")
    return EXIT_OK


def _refine_one(job):
    path, out_path, obj_override, grasp_path, manip_path, rcfg_dict, cfg_dict = job
    cfg = type(DEFAULT).from_dict(cfg_dict)
    rcfg = RefineConfig.from_dict(rcfg_dict)
    seq = ds.read_sequence(path)
    obj = _object_for(seq, path, obj_override)
    nets = (SurrogateNet.load(grasp_path) if grasp_path else None,
            SurrogateNet.load(manip_path) if manip_path else None)
    res = refine_sequence(seq.poses, seq.trajectory(cfg.mass, cfg.gravity), obj, nets, rcfg, cfg)
    poses = [ds.round_pose(p) for p in res.poses]
    refined = seq.with_poses(poses, role="refined", refine={"converged": res.converged,
                                                            "iterations": res.iterations, "config": rcfg_dict})
    ds.write_sequence(refined, out_path)
    return res.converged


def cmd_refine(args) -> int:
    st = _settings(args)
    rcfg = RefineConfig.from_dict(_override(
        st.section("refine"), steps=args.steps, alpha_grasp=args.alpha_grasp, alpha_manip=args.alpha_manip,
        alpha_reg=args.alpha_reg, alpha_smooth=args.alpha_smooth, sample_seed=args.seed))
    for p in (args.grasp_net, args.manip_net):
        if p and not Path(p).exists():
            raise FileNotFoundError(p)
    inp = Path(args.inp)
    files = _seq_files(inp)
    if inp.is_dir():
        files = [f for f in files if f.name.endswith(".noisy.seq.jsonl")] or files
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        outs = [out_dir / f"{_key(f)}.refined.seq.jsonl" for f in files]
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        outs = [Path(args.out)]
    jobs = [(f, o, args.object, args.grasp_net, args.manip_net, rcfg.to_dict(), st.globals.to_dict())
            for f, o in zip(files, outs)]
    conv = _map(_refine_one, jobs, args.threads)
    n_bad = len(conv) - sum(conv)
    msg = f"refined {len(conv)} sequence(s) -> {args.out}"
    if n_bad:
        msg += f" ({n_bad} stopped before convergence)"
    print(msg)
    return EXIT_OK


def cmd_report(args) -> int:
    from . import plotting

    st = _settings(args)
    cfg = st.globals
    before_pairs = _pair(Path(args.before), Path(args.ref), role_a="noisy")
    after_pairs = _pair(Path(args.after), Path(args.ref), role_a="refined")
    if [_key(a) for a, _ in before_pairs] != [_key(a) for a, _ in after_pairs] and len(before_pairs) > 1:
        raise ValueError("before and after sets contain different sequences")
    mk = lambda pairs: [(p, r, args.object, cfg.to_dict(), args.seed, not args.no_iv) for p, r in pairs]  # noqa: E731
    before = _map(_eval_pair, mk(before_pairs), args.threads)
    after = _map(_eval_pair, mk(after_pairs), args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "frames.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("arm",) + FRAME_FIELDS)
        w.writeheader()
        for arm, pairs, res in (("before", before_pairs, before), ("after", after_pairs, after)):
            for (p, _), frames in zip(pairs, res):
                w.writerows(_frame_rows(_key(p), frames, arm))
    fb = [f for fr in before for f in fr]
    fa = [f for fr in after for f in fr]
    sb, sa = mt.summarize(fb), mt.summarize(fa)
    table = format_arrow_table(sb, sa)
    (out / "summary.md").write_text(table + "\n")
    (out / "summary.json").write_text(json.dumps({"before": sb, "after": sa, "config": cfg.to_dict(),
                                                  "seed": args.seed}, indent=2, sort_keys=True) + "\n")
    plotting.summary_bars(sb, sa, out / "summary.png")
    plotting.per_frame(fb, fa, out / "per_frame.png", cfg.c_pd, cfg.c_fe)
    print(table)
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hoiplaus", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a labeled synthetic dataset")
    _add_common(p, "output directory")
    p.add_argument("--pairs", type=int, help="number of clean/noisy pairs (overrides config)")
    p.add_argument("--interp-steps", type=int, help="interpolation steps per pair (overrides config)")
    p.add_argument("--eval-sequences", type=int, help="evaluation sequences to write (overrides config)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("field", help="compute correspondence fields for a sequence")
    _add_common(p, "output .jsonl file")
    p.add_argument("--in", dest="inp", required=True, help="input .seq.jsonl")
    p.add_argument("--object", help="object OBJ path or builtin:<name> (default: from the sequence header)")
    p.add_argument("--frame", type=int, help="single frame index (default: all frames)")
    p.set_defaults(func=cmd_field)

    p = sub.add_parser("eval", help="per-frame metrics of sequences against references")
    _add_common(p, "output directory for frames.csv and summary.json")
    p.add_argument("--in", dest="inp", required=True, help="sequence file or directory")
    p.add_argument("--ref", required=True, help="reference (clean) sequence file or directory")
    p.add_argument("--object", help="object OBJ path or builtin:<name>")
    p.add_argument("--no-iv", action="store_true", help="skip the intersection volume")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-surrogate", help="train a plausibility network")
    _add_common(p, "output .bin path (a .bin.json sidecar is written next to it)")
    p.add_argument("--kind", choices=("grasp", "manip"), required=True, help="which network")
    p.add_argument("--data", required=True, help="dataset directory or labels.jsonl")
    p.add_argument("--epochs", type=int, help="training epochs (overrides config)")
    p.add_argument("--lr", type=float, help="learning rate (overrides config)")
    p.add_argument("--batch-size", type=int, help="minibatch size (overrides config)")
    p.add_argument("--hard-only", action="store_true", help="drop the soft target (ablation arm)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="refine noisy sequences with the trained networks")
    _add_common(p, "output .seq.jsonl (file input) or directory (directory input)")
    p.add_argument("--in", dest="inp", required=True, help="noisy sequence file or directory")
    p.add_argument("--object", help="object OBJ path or builtin:<name>")
    p.add_argument("--grasp-net", help="grasp network .bin")
    p.add_argument("--manip-net", help="manipulation network .bin")
    p.add_argument("--steps", type=int, help="max gradient steps (overrides config)")
    p.add_argument("--alpha-grasp", type=float, help="grasp loss weight")
    p.add_argument("--alpha-manip", type=float, help="manipulation loss weight")
    p.add_argument("--alpha-reg", type=float, help="weight of the distance to the input poses")
    p.add_argument("--alpha-smooth", type=float, help="weight of the frame-to-frame smoothness term")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("report", help="before/after metric table, CSV and figures")
    _add_common(p, "output directory")
    p.add_argument("--before", required=True, help="noisy sequence file or directory")
    p.add_argument("--after", required=True, help="refined sequence file or directory")
    p.add_argument("--ref", required=True, help="clean reference file or directory")
    p.add_argument("--object", help="object OBJ path or builtin:<name>")
    p.add_argument("--no-iv", action="store_true", help="skip the intersection volume")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        # BLAS stays single-threaded so results never depend on --threads.
        with threadpool_limits(limits=1):
            return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ds.SchemaError, LayoutError, MeshParseError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: bad input format: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ds.GraspError, DegenerateMeshError, NotWatertightError) as exc:
        print(f"error: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except ValueError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
