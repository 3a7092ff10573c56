"""Command-line entry point orchestrating all pipelines.

One binary with subcommands; JSON config files carry the grid/train/decoder
settings and flags override them. Exit codes: 0 ok, 2 bad usage, 3 bad input
data, 4 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import gradcheck, online, store, synth, token
from .decoder import init_decoder
from .errors import LatentMapError, ValidationError
from .grid import GridConfig, LatentGrid
from .ingest import back_project, concat_batches
from .trainer import TrainConfig, fit_scene, mean_cosine, pretrain_decoder

REL_TOL = gradcheck.REL_TOL


@contextmanager
def _thread_cap():
    """Honor LMAP_THREADS by capping BLAS pools when threadpoolctl exists."""
    cap = os.environ.get("LMAP_THREADS")
    if not cap:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=int(cap)):
        yield


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: cannot parse JSON ({exc})") from exc


def _load_config(args) -> dict:
    return _load_json(args.config) if args.config else {}


def _grid_config(cfg: dict, seed_override: int | None) -> GridConfig:
    g = cfg.get("grid")
    if not g:
        raise ValidationError("config file needs a 'grid' section (bounds, cell sizes)")
    seed = seed_override if seed_override is not None else int(g.get("seed", 0))
    return GridConfig(
        bounds_min=g["bounds_min"],
        bounds_max=g["bounds_max"],
        cell_sizes=tuple(g["cell_sizes"]),
        feature_dim=int(g.get("feature_dim", 8)),
        table_size=int(g.get("table_size", 2**19)),
        seed=seed,
    )


def _train_config(cfg: dict, seed_override: int | None) -> TrainConfig:
    t = cfg.get("train", {})
    seed = seed_override if seed_override is not None else int(t.get("seed", 0))
    target = t.get("target_cosine")
    return TrainConfig(
        batch_size=int(t.get("batch_size", 4096)),
        lr_grid=float(t.get("lr_grid", 1e-2)),
        lr_decoder=float(t.get("lr_decoder", 1e-3)),
        beta1=float(t.get("beta1", 0.9)),
        beta2=float(t.get("beta2", 0.999)),
        eps=float(t.get("eps", 1e-8)),
        steps=int(t.get("steps", 2000)),
        freeze_decoder=bool(t.get("freeze_decoder", False)),
        seed=seed,
        loss=str(t.get("loss", "cosine")),
        target_cosine=float(target) if target is not None else None,
        eval_every=int(t.get("eval_every", 250)),
    )


def _online_config(cfg: dict, seed_override: int | None) -> online.OnlineConfig:
    o = cfg.get("online", {})
    seed = seed_override if seed_override is not None else int(o.get("seed", 0))
    return online.OnlineConfig(
        t_update=int(o.get("t_update", 5)),
        k_update=int(o.get("k_update", 20)),
        eta=float(o.get("eta", 1e-2)),
        freeze_decoder=bool(o.get("freeze_decoder", True)),
        batch_size=int(o.get("batch_size", 4096)),
        seed=seed,
    )


def _decoder_for(cfg: dict, in_dim: int, out_dim: int, seed_override: int | None):
    d = cfg.get("decoder", {})
    seed = seed_override if seed_override is not None else int(d.get("seed", 7))
    hidden = tuple(d.get("hidden_dims", (128, 128)))
    return init_decoder(seed, hidden, in_dim, out_dim)


def _ingest_dataset(dataset_dir, grid: LatentGrid):
    frames = store.load_dataset(dataset_dir)
    if not frames:
        raise ValidationError(f"{dataset_dir}: dataset has no frames")
    batches = [back_project(f, bounds=grid.bounds) for f in frames]
    data = concat_batches(batches)
    if len(data) == 0:
        raise ValidationError(f"{dataset_dir}: no valid samples after filtering")
    return data


# ── commands ─────────────────────────────────────────────────────────────


def cmd_synth(args) -> int:
    spec = synth.spec_from_json(_load_json(args.spec))
    frames, _ = synth.synth_scene(spec, n_frames=args.frames)
    store.write_dataset(frames, args.out_dir, scene_spec_json=synth.spec_to_json(spec))
    print(f"synth: wrote {len(frames)} frames to {args.out_dir}")
    return 0


def cmd_build(args) -> int:
    cfg = _load_config(args)
    grid = LatentGrid(_grid_config(cfg, args.seed))
    data = _ingest_dataset(args.dataset_dir, grid)
    if args.decoder:
        decoder = store.load_decoder(args.decoder)
        if decoder.in_dim != grid.feature_dim:
            raise ValidationError(
                f"decoder expects {decoder.in_dim} inputs, grid encodes {grid.feature_dim}"
            )
        if decoder.out_dim != data.embedding_dim:
            raise ValidationError(
                f"decoder emits {decoder.out_dim} dims, dataset carries "
                f"{data.embedding_dim}"
            )
    else:
        decoder = _decoder_for(cfg, grid.feature_dim, data.embedding_dim, args.seed)
    train_cfg = _train_config(cfg, args.seed)
    losses = fit_scene(grid, decoder, data, train_cfg)
    store.save_map(grid, decoder, args.out_map)
    if args.loss_csv:
        store.write_loss_csv(losses, args.loss_csv)
    cos = mean_cosine(grid, decoder, data)
    print(
        f"build: {len(data)} samples, {len(losses)} steps, "
        f"train_cosine {cos:.4f}, map {args.out_map}"
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    grids, datasets = [], []
    for i, scene_dir in enumerate(args.scene_dirs):
        gcfg = _grid_config(cfg, args.seed)
        gcfg = GridConfig(
            gcfg.bounds_min, gcfg.bounds_max, gcfg.cell_sizes,
            gcfg.feature_dim, gcfg.table_size, gcfg.seed + i,
        )
        grid = LatentGrid(gcfg)
        grids.append(grid)
        datasets.append(_ingest_dataset(scene_dir, grid))
    ks = {d.embedding_dim for d in datasets}
    if len(ks) != 1:
        raise ValidationError(f"scenes disagree on embedding dim: {sorted(ks)}")
    decoder = _decoder_for(cfg, grids[0].feature_dim, ks.pop(), args.seed)
    train_cfg = _train_config(cfg, args.seed)
    pretrain_decoder(datasets, grids, decoder, train_cfg)
    store.save_decoder(decoder, args.out_decoder)
    if args.out_map_dir:
        out = Path(args.out_map_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, grid in enumerate(grids):
            store.save_map(grid, decoder, out / f"scene_{i:02d}.lmap")
    print(f"pretrain: {len(grids)} scenes, decoder {args.out_decoder}")
    return 0


def cmd_replay(args) -> int:
    cfg = _load_config(args)
    grid, decoder = store.load_map(args.map)
    steps = store.load_stream(args.stream)
    reports = online.replay(grid, decoder, steps, _online_config(cfg, args.seed))
    store.save_map(grid, decoder, args.out_map)
    if args.report:
        store.write_report_csv(reports, args.report)
    updates = sum(1 for r in reports if r.updated)
    opt_steps = sum(r.opt_steps for r in reports)
    print(
        f"replay: {len(reports)} steps, {updates} updates, {opt_steps} opt steps, "
        f"map {args.out_map}"
    )
    return 0


def cmd_query(args) -> int:
    grid, decoder = store.load_map(args.map)
    try:
        points = np.loadtxt(args.points, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"{args.points}: cannot parse points ({exc})") from exc
    if points.shape[1] != 3:
        raise ValidationError(f"points file must have 3 columns, got {points.shape[1]}")
    feats, _ = grid.encode_batch(points)
    decoded = decoder.decode_batch(feats)
    lines = [" ".join(repr(float(v)) for v in row) for row in decoded]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    else:
        for line in lines:
            print(line)
    if args.reference:
        try:
            refs = np.loadtxt(args.reference, dtype=np.float64, ndmin=2)
        except (OSError, ValueError) as exc:
            raise ValidationError(
                f"{args.reference}: cannot parse reference ({exc})"
            ) from exc
        if refs.shape != decoded.shape:
            raise ValidationError(
                f"reference shape {refs.shape} does not match decoded {decoded.shape}"
            )
        den = np.maximum(
            np.linalg.norm(decoded, axis=1) * np.linalg.norm(refs, axis=1), 1e-8
        )
        cosines = np.sum(decoded * refs, axis=1) / den
        for i, c in enumerate(cosines):
            print(f"point_cosine {i} {c:.6f}")
        print(f"mean_cosine {cosines.mean():.6f}")
    return 0


def cmd_token(args) -> int:
    grid, decoder = store.load_map(args.map)
    enc_cfg = token.PosEncConfig.for_grid(grid, args.frequencies)
    in_dim = decoder.out_dim + enc_cfg.output_dim
    if args.weights:
        weights = store.load_aggregator(args.weights)
        if weights.net.in_dim != in_dim:
            raise ValidationError(
                f"aggregator expects {weights.net.in_dim} inputs, map needs {in_dim}"
            )
    else:
        hidden = tuple(int(h) for h in args.hidden.split(",") if h)
        weights = token.init_aggregator(args.weights_seed, in_dim, hidden, args.token_dim)
    tok = token.map_token(
        grid, decoder, weights,
        num_frequencies=args.frequencies, allow_empty=args.allow_empty,
    )
    store.save_token(tok, args.out, fmt=args.format)
    print(f"token: dim {len(tok.values)}, {tok.vertex_count} vertices, {args.out}")
    return 0


def cmd_export(args) -> int:
    grid, decoder = store.load_map(args.map)
    count = store.export_pca_ply(grid, decoder, args.out, seed=args.pca_seed)
    print(f"export: {count} points, {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = gradcheck.run_suite(seed=seed, cases=args.cases, verbose=args.verbose)
    for name in ("decoder", "grid", "composite"):
        status = "ok" if results[name] <= REL_TOL else "FAIL"
        print(f"gradcheck {name}: max_rel_err {results[name]:.3e} (tol {REL_TOL:g}) {status}")
    if not results["passed"]:
        print("gradcheck: FAILED", file=sys.stderr)
        return 4
    print(f"gradcheck: all passed ({args.cases} cases, seed {seed})")
    return 0


# ── parser ───────────────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentmap",
        description="Incremental 3D latent feature mapping engine.",
    )
    parser.add_argument("--seed", type=int, default=None,
                        help="override every configured RNG seed")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--verbose", action="store_true", help="chatty progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene into a frame dataset")
    p.add_argument("spec", help="scene spec JSON")
    p.add_argument("out_dir", help="output dataset directory")
    p.add_argument("--frames", type=int, default=None, help="override frame count")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build", help="fit an offline map from a frame dataset")
    p.add_argument("dataset_dir", help="frame dataset directory")
    p.add_argument("--out-map", required=True, help="output map file")
    p.add_argument("--decoder", default=None, help="pre-trained decoder file")
    p.add_argument("--loss-csv", default=None, help="write per-step losses as CSV")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("pretrain", help="jointly pre-train a decoder across scenes")
    p.add_argument("scene_dirs", nargs="+", help="one dataset directory per scene")
    p.add_argument("--out-decoder", required=True, help="output decoder file")
    p.add_argument("--out-map-dir", default=None, help="also save per-scene maps here")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("replay", help="run the online update loop over a stream")
    p.add_argument("--map", required=True, help="input map file")
    p.add_argument("--stream", required=True, help="stream manifest JSON")
    p.add_argument("--out-map", required=True, help="output map file")
    p.add_argument("--report", default=None, help="write per-step report CSV")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("query", help="decode features at query points")
    p.add_argument("--map", required=True, help="map file")
    p.add_argument("--points", required=True, help="text file, one 'x y z' per line")
    p.add_argument("--reference", default=None,
                   help="expected embeddings, one row per point; prints cosines")
    p.add_argument("--out", default=None, help="write decoded features here")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("token", help="extract the global map token")
    p.add_argument("--map", required=True, help="map file")
    p.add_argument("--weights", default=None, help="aggregator weights file")
    p.add_argument("--weights-seed", type=int, default=0,
                   help="seed for fresh aggregator weights when no file is given")
    p.add_argument("--hidden", default="128,256",
                   help="hidden widths for fresh aggregator weights")
    p.add_argument("--token-dim", type=int, default=256, help="token width")
    p.add_argument("--frequencies", type=int, default=6,
                   help="positional encoding frequency count")
    p.add_argument("--format", choices=("binary", "text"), default="binary")
    p.add_argument("--allow-empty", action="store_true",
                   help="emit a zero token instead of failing on an empty map")
    p.add_argument("--out", required=True, help="output token file")
    p.set_defaults(func=cmd_token)

    p = sub.add_parser("export", help="write occupied vertices as a PCA-colored PLY")
    p.add_argument("--map", required=True, help="map file")
    p.add_argument("--out", required=True, help="output .ply path")
    p.add_argument("--pca-seed", type=int, default=0, help="power iteration seed")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--cases", type=int, default=20, help="random cases per check")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_cap():
            return args.func(args)
    except LatentMapError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: OSError: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
