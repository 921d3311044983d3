"""Command-line entry point: ``mdae <command> [flags]``.

Logs go to stderr as one JSON object per line. Module errors exit with
status 1 and a JSON error record; usage errors exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

COMMANDS = (
    "prep", "features", "coords", "check-anatomy", "synth", "train", "embed", "train-head",
    "manipulate", "eval-separability", "eval-fid", "project", "render",
)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        out = {"t": round(time.time(), 3), "level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        fields = getattr(record, "fields", None)
        if fields:
            out.update(fields)
        return json.dumps(out)


log = logging.getLogger("mdae.cli")


def _event(msg: str, **fields):
    log.info(msg, extra={"fields": fields})


def _write_json(obj, path=None):
    text = json.dumps(obj, indent=2)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _pair(text: str) -> tuple[str, str]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2 or not all(parts):
        raise argparse.ArgumentTypeError(f"expected two comma-separated names, got {text!r}")
    return parts[0], parts[1]


def _frame_range(text: str) -> tuple[int, int | None]:
    start, sep, end = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected start:end, got {text!r}")
    try:
        return int(start or 0), (int(end) if end else None)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integer frame bounds, got {text!r}") from None


def _json_arg(text: str):
    """Inline JSON or a path to a JSON file."""
    p = Path(text)
    try:
        return json.loads(p.read_text()) if p.exists() else json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc}") from None


# --------------------------------------------------------------------------
# dataset helpers


def _load_dataset(data_dir, split=None):
    from .motion import DatasetManifest, load_sequence

    root = Path(data_dir)
    manifest = DatasetManifest.load(root / "manifest.json")
    entries = [e for e in manifest if split is None or e.split == split]
    if not entries:
        raise ValueError(f"no manifest entries in {root}" + (f" for split {split!r}" if split else ""))
    return entries, [load_sequence(root / e.path) for e in entries]


def _chain(path, data_dir=None):
    from .pose import SkeletonChain

    if path:
        return SkeletonChain.load(path)
    if data_dir and (Path(data_dir) / "chain.json").exists():
        return SkeletonChain.load(Path(data_dir) / "chain.json")
    raise ValueError("no chain given (--chain) and no chain.json in the data directory")


def _meta_row(e) -> dict:
    return {"id": e.path, "participant": e.meta.participant, "technique": e.meta.technique,
            "grade_index": e.meta.grade_index, "grade": e.meta.grade, "split": e.split}


# --------------------------------------------------------------------------
# commands


def cmd_synth(a):
    from .synth import SynthConfig, generate_synthetic_dataset, write_dataset

    cfg = SynthConfig(
        techniques=tuple(a.techniques), grade_levels=tuple(a.grades), samples_per_cell=a.samples_per_cell,
        frames=a.frames, rate=a.rate, participants=a.participants, link_jitter=a.link_jitter, marker_noise=a.marker_noise,
    )
    seqs, manifest = generate_synthetic_dataset(cfg, seed=a.seed)
    write_dataset(seqs, manifest, a.out)
    _event("synth", sequences=len(seqs), out=str(a.out))


def cmd_prep(a):
    from .motion import save_sequence
    from .preprocess import (center_to_origin, center_wand_markers, detect_outliers, downsample,
                             mirror_left_to_right, rotate_to_facing, trim)

    entries, seqs = _load_dataset(a.data)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    processed = []
    for e, s in zip(entries, seqs):
        if a.trim:
            s = trim(s, *a.trim)
        if a.rate:
            s = downsample(s, a.rate)
        if a.wand_triples:
            s = center_wand_markers(s, [tuple(t) for t in a.wand_triples])
        if a.mirror_pairs and e.meta.limb_side == "left":
            s = mirror_left_to_right(s, [tuple(p) for p in a.mirror_pairs])
        if a.root_marker:
            s = center_to_origin(s, a.root_marker)
        if a.facing_markers:
            s = rotate_to_facing(s, a.facing_markers)
        save_sequence(s, out / e.path)
        processed.append(s)
    src = Path(a.data)
    for name in ("manifest.json", "chain.json"):
        if (src / name).exists() and (src / name).resolve() != (out / name).resolve():
            shutil.copyfile(src / name, out / name)
    head = a.head_marker if all(a.head_marker in s.markers for s in processed) else None
    report = detect_outliers(processed, z_thresh=a.z_thresh, head_marker=head, ids=[e.path for e in entries])
    _write_json(report.to_json(), a.report)
    _event("prep", sequences=len(processed), flagged=len(report.flagged()))


def cmd_features(a):
    from .motion import load_sequence
    from .pose import encode_sequence, save_features

    seq = load_sequence(a.input)
    feats = encode_sequence(seq, _chain(a.chain), distances=a.distances)
    save_features(feats, a.out)
    _event("features", frames=feats.frames, links=feats.chain.n_links, out=str(a.out))


def cmd_coords(a):
    from .motion import load_sequence, save_sequence
    from .pose import decode_sequence, load_features

    seq = decode_sequence(load_features(a.input))
    save_sequence(seq, a.out)
    report = {"frames": seq.frames, "markers": len(seq.markers)}
    if a.reference:
        ref = load_sequence(a.reference)
        idx = [ref.markers.index(m) for m in seq.markers]
        err = np.linalg.norm(seq.coords - ref.coords[:, idx], axis=-1)
        report.update(max_error=float(err.max()), mean_error=float(err.mean()))
    _write_json(report)


def cmd_check_anatomy(a):
    from .pose import anatomy_report

    entries, seqs = _load_dataset(a.data, a.split)
    rep = anatomy_report(seqs, _chain(a.chain, a.data))
    rep["reference"] = {"link_distance_std_m": 0.0035, "reconstruction_error_m": 0.0105,
                        "note": "reported figures for the full motion-capture dataset, not asserted"}
    _write_json(rep, a.out)


def _feature_set(a, chain, split):
    from .network import build_feature_set
    from .synth import FOOT_MARKERS

    entries, seqs = _load_dataset(a.data, split)
    feet = tuple(a.foot_markers) if a.foot_markers is not None else (FOOT_MARKERS if seqs[0].contacts is not None else ())
    return entries, build_feature_set(seqs, chain, a.max_frames, feet)


def cmd_train(a):
    import torch

    from .diffusion import make_schedule
    from .network import (TrainConfig, evaluate_loss, fit_normalization, load_for_resume, new_model,
                          save_checkpoint, train)

    chain = _chain(a.chain, a.data)
    _, fs = _feature_set(a, chain, a.split)
    config = TrainConfig(phi_pos=a.phi_pos, phi_foot=a.phi_foot, phi_vel=a.phi_vel, batch_size=a.batch_size,
                         lr=a.lr, steps=a.steps, seed=a.seed, optimizer=a.optimizer)
    model = new_model(chain, seed=a.seed, max_frames=a.max_frames)
    if a.resume:
        sched = load_for_resume(model, a.resume).schedule
    else:
        fit_normalization(model, fs)
        sched = make_schedule(a.schedule, a.T)
    torch.manual_seed(a.seed)
    before = evaluate_loss(model, fs, config, sched)["total"]
    train(model, fs, config, sched, log=lambda m: _event("step", **{k: v for k, v in m.items() if k != "diagnostics"}),
          eval_every=a.log_every)
    after = evaluate_loss(model, fs, config, sched)["total"]
    save_checkpoint(model, sched, config, a.out, chain, extra={"loss_before": before, "loss_after": after})
    _event("train", params=model.n_params(), loss_before=before, loss_after=after, out=str(a.out))


def cmd_embed(a):
    from .evaluate import save_embeddings
    from .network import embed, load_checkpoint

    ck = load_checkpoint(a.model)
    entries, fs = _feature_set(a, ck.chain or _chain(a.chain, a.data), a.split)
    Z = embed(ck.model, fs)
    save_embeddings(a.out, Z, [_meta_row(e) for e in entries])
    _event("embed", samples=len(Z), d_z=Z.shape[1], out=str(a.out))


def _labels(meta):
    from .motion import SampleMeta

    return [SampleMeta(m.get("participant") or "unknown", m["technique"], int(m["grade_index"])) for m in meta]


def _select(Z, meta, split):
    if split is None:
        return Z, meta
    keep = [i for i, m in enumerate(meta) if m.get("split") == split]
    if not keep:
        raise ValueError(f"no embeddings in split {split!r}")
    return Z[keep], [meta[i] for i in keep]


def cmd_train_head(a):
    from .evaluate import load_embeddings
    from .manipulate import save_head, train_head

    Z, meta = _select(*load_embeddings(a.embeddings), a.split)
    head = train_head(Z, _labels(meta), weight_decay=a.weight_decay, seed=a.seed)
    save_head(head, a.out)
    _event("train-head", samples=len(Z), out=str(a.out))


def cmd_eval_separability(a):
    from .evaluate import confusion_and_uar, grade_mae, load_embeddings
    from .manipulate import load_head, predict

    head = load_head(a.head)
    Z, meta = _select(*load_embeddings(a.embeddings), a.split)
    probs, grade = predict(head, Z)
    pred = [head.classes[i] for i in probs.argmax(1)]
    truth = [m["technique"] for m in meta]
    C, uar = confusion_and_uar(pred, truth, head.classes)
    g = grade_mae(grade, [float(m["grade_index"]) / 12 for m in meta])
    _write_json({"classes": list(head.classes), "confusion": C.tolist(), "uar": uar, "grade": g.to_json(),
                 "samples": len(Z)}, a.out)


def cmd_eval_fid(a):
    from .evaluate import fid, load_embeddings

    groups = []
    for path, flt in ((a.a, a.filter_a), (a.b, a.filter_b)):
        Z, meta = load_embeddings(path)
        if flt:
            key, _, val = flt.partition("=")
            keep = [i for i, m in enumerate(meta) if str(m.get(key)) == val]
            Z = Z[keep]
        groups.append(Z)
    _write_json({"fid": fid(*groups), "n_a": len(groups[0]), "n_b": len(groups[1])})


def cmd_project(a):
    from .evaluate import load_embeddings, pca_project_2d

    Z, meta = load_embeddings(a.embeddings)
    labels = [m.get(a.label_column, "") for m in meta] if a.label_column else None
    proj = pca_project_2d(Z, labels)
    proj.to_csv(a.out)
    _event("project", rank=proj.rank, explained=proj.explained.tolist(), out=str(a.out))


def cmd_manipulate(a):
    from .motion import load_sequence, save_sequence
    from .manipulate import load_head, manipulate_motion
    from .network import load_checkpoint

    ck = load_checkpoint(a.model)
    chain = _chain(a.chain) if a.chain else ck.chain
    if chain is None:
        raise ValueError("checkpoint has no chain; pass --chain")
    head = load_head(a.head)
    seq = load_sequence(a.input)
    out, res = manipulate_motion(seq, chain, ck.model, ck.schedule, head, a.target_technique, a.target_grade,
                                 steps=a.steps, grid=a.grid, step=a.lambda_step)
    save_sequence(out, a.out)
    if a.trace_out:
        _write_json(res.trace_json(), a.trace_out)
    _event("manipulate", lam=res.lam, lambda_max=res.lambda_max, out=str(a.out))


_VIEWS = {"front": (0, 2), "side": (1, 2), "top": (0, 1)}


def _svg(points, edges, view, size=400, pad=20.0, bounds=None) -> str:
    i, j = _VIEWS[view]
    lo, hi = bounds
    span = max(hi[0] - lo[0], hi[1] - lo[1], 1e-9)
    scale = (size - 2 * pad) / span

    def xy(p):
        return pad + (p[i] - lo[0]) * scale, size - pad - (p[j] - lo[1]) * scale

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for a_, b_ in edges:
        (x1, y1), (x2, y2) = xy(points[a_]), xy(points[b_])
        lines.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="black" stroke-width="2"/>')
    for p in points:
        x, y = xy(p)
        lines.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="crimson"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_render(a):
    import csv

    from .motion import load_sequence

    seq = load_sequence(a.input)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "markers.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "marker", "x", "y", "z"])
        for f in range(seq.frames):
            for m, p in zip(seq.markers, seq.coords[f]):
                w.writerow([f, m, *(repr(float(v)) for v in p)])
    edges = []
    if a.chain:
        chain = _chain(a.chain)
        edges = [(seq.index(p), seq.index(c)) for p, c in chain.links]
    i, j = _VIEWS[a.view]
    flat = seq.coords.reshape(-1, 3)
    bounds = ((flat[:, i].min(), flat[:, j].min()), (flat[:, i].max(), flat[:, j].max()))
    frames = range(0, seq.frames, a.every)
    for f in frames:
        (out / f"frame_{f:04d}.svg").write_text(_svg(seq.coords[f], edges, a.view, bounds=bounds))
    _event("render", frames=len(frames), out=str(out))


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON or TOML file supplying default flag values")
    common.add_argument("--threads", type=int, default=None, help="cap on torch/BLAS worker threads")
    common.add_argument("--log-level", default="info", choices=("debug", "info", "warning", "error"))

    p = argparse.ArgumentParser(prog="mdae", description="Motion diffusion autoencoder toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    s = add("synth", cmd_synth, "generate a synthetic labelled dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--techniques", nargs="+", default=["RP", "FK"])
    s.add_argument("--grades", nargs="+", type=int, default=[0, 3, 6, 9, 12])
    s.add_argument("--samples-per-cell", type=int, default=25)
    s.add_argument("--frames", type=int, default=50)
    s.add_argument("--rate", type=float, default=25.0)
    s.add_argument("--participants", type=int, default=6)
    s.add_argument("--link-jitter", type=float, default=0.0, help="per-frame link length noise std (m)")
    s.add_argument("--marker-noise", type=float, default=0.0)

    s = add("prep", cmd_prep, "downsample, normalize and mirror a dataset; report outliers")
    s.add_argument("--data", required=True, help="dataset directory with manifest.json")
    s.add_argument("--out", required=True)
    s.add_argument("--rate", type=float)
    s.add_argument("--z-thresh", type=float, default=3.0)
    s.add_argument("--root-marker")
    s.add_argument("--head-marker", default="HEAD")
    s.add_argument("--facing-markers", type=_pair, help="LEFT,RIGHT")
    s.add_argument("--mirror-pairs", type=_json_arg, help="JSON list of [left, right] names")
    s.add_argument("--wand-triples", type=_json_arg, help="JSON list of [neighbor, wand, neighbor]")
    s.add_argument("--trim", type=_frame_range, help="start:end frame range")
    s.add_argument("--report", help="outlier report path (default stdout)")

    s = add("features", cmd_features, "marker coordinates to pose features")
    s.add_argument("input")
    s.add_argument("--chain", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--distances", choices=("measured", "provided"), default="measured")

    s = add("coords", cmd_coords, "pose features back to marker coordinates")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--reference", help="original sequence for a round-trip error report")

    s = add("check-anatomy", cmd_check_anatomy, "link-length spread and reconstruction error of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--chain")
    s.add_argument("--split")
    s.add_argument("--out")

    def data_flags(s, split_default):
        s.add_argument("--data", required=True)
        s.add_argument("--chain")
        s.add_argument("--split", default=split_default)
        s.add_argument("--max-frames", type=int, default=100)
        s.add_argument("--foot-markers", nargs="*")

    s = add("train", cmd_train, "train the autoencoder")
    data_flags(s, "train")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    s.add_argument("--phi-pos", type=float, default=1.0)
    s.add_argument("--phi-foot", type=float, default=1.0)
    s.add_argument("--phi-vel", type=float, default=1.0)
    s.add_argument("--schedule", choices=("cosine", "linear"), default="cosine")
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--resume")
    s.add_argument("--log-every", type=int, default=100)

    s = add("embed", cmd_embed, "semantic embeddings of a dataset split to CSV")
    data_flags(s, None)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)

    s = add("train-head", cmd_train_head, "fit the linear attribute head")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--weight-decay", type=float, default=1e-3)
    s.add_argument("--out", required=True)

    s = add("manipulate", cmd_manipulate, "edit technique and/or grade of one recording")
    s.add_argument("input")
    s.add_argument("--model", required=True)
    s.add_argument("--head", required=True)
    s.add_argument("--chain")
    s.add_argument("--out", required=True)
    s.add_argument("--target-technique")
    s.add_argument("--target-grade", type=float)
    s.add_argument("--lambda-step", type=float, default=0.1)
    s.add_argument("--grid", type=int, default=101)
    s.add_argument("--steps", type=int, default=20, help="diffusion steps for inversion and decoding")
    s.add_argument("--trace-out")

    s = add("eval-separability", cmd_eval_separability, "confusion matrix, UAR and grade MAE of the head")
    s.add_argument("--head", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out")

    s = add("eval-fid", cmd_eval_fid, "Frechet distance between two embedding groups")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--filter-a", help="key=value metadata filter for group a")
    s.add_argument("--filter-b")

    s = add("project", cmd_project, "2D principal-component projection to CSV")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--label-column", default="technique")
    s.add_argument("--out", required=True)

    s = add("render", cmd_render, "per-frame CSV and SVG skeleton drawings")
    s.add_argument("input")
    s.add_argument("--chain")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--view", choices=tuple(_VIEWS), default="front")
    s.add_argument("--every", type=int, default=1)
    return p


def _load_config(path) -> dict:
    p = Path(path)
    text = p.read_bytes()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        cfg = tomllib.loads(text.decode("utf-8"))
    else:
        cfg = json.loads(text)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a table/object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    command = argv[0] if argv else None
    subs = parser._subparsers._group_actions[0].choices
    if path and command in subs:
        try:
            cfg = _load_config(path)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {path}: {exc}")
        sub = subs[command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            parser.error(f"config keys not valid for {command}: {', '.join(unknown)}")
        # Config supplies defaults; explicit flags still win.
        sub.set_defaults(**cfg)
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("mdae")
    root.handlers[:] = [handler]
    root.setLevel(args.log_level.upper())
    root.propagate = False
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc).strip("'\""), "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
