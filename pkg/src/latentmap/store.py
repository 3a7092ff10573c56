"""Persistence and export: map files, frame datasets, tokens, PLY dumps.

All binary formats are little-endian with 4-byte magics. The map file guards
its whole body with a CRC32 so truncations and bit flips are rejected before
any state is constructed; loaders parse into temporaries and only assemble
live objects once every byte is accounted for. Feature and parameter
payloads are stored as float32; in-memory math stays float64.
"""

from __future__ import annotations

import csv
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .decoder import MlpDecoder
from .errors import EmptyMapError, FormatError, ValidationError
from .grid import GridConfig, LatentGrid
from .ingest import CameraFrame, CameraIntrinsics, CameraPose
from .token import AggregatorWeights, MapToken, decode_occupied

MAP_MAGIC = b"LMAP"
DEPTH_MAGIC = b"LMDP"
FEAT_MAGIC = b"LMFT"
MASK_MAGIC = b"LMMK"
DECODER_MAGIC = b"LMDC"
TOKEN_MAGIC = b"LMTK"
AGGREGATOR_MAGIC = b"LMAG"
MAP_FORMAT_VERSION = 1


# ── low-level readers/writers ────────────────────────────────────────────


class _Reader:
    """Sequential binary reader that reports the byte offset on any failure."""

    def __init__(self, data: bytes, name: str):
        self.data = data
        self.name = name
        self.off = 0

    def fail(self, why: str):
        raise FormatError(f"{self.name}: {why} (offset {self.off}, size {len(self.data)})")

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            self.fail(f"truncated: needed {n} more bytes")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def magic(self, expected: bytes):
        got = self.take(4)
        if got != expected:
            self.off -= 4
            self.fail(f"bad magic {got!r}, expected {expected!r}")

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def f64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def f32s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)

    def u32s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4").astype(np.int64)

    def done(self):
        if self.off != len(self.data):
            self.fail(f"{len(self.data) - self.off} trailing bytes")


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def raw(self, b: bytes):
        self.buf.extend(b)

    def u8(self, v: int):
        self.buf.append(v & 0xFF)

    def u32(self, v: int):
        self.buf.extend(struct.pack("<I", v))

    def i64(self, v: int):
        self.buf.extend(struct.pack("<q", v))

    def f64s(self, arr):
        self.buf.extend(np.asarray(arr, dtype="<f8").tobytes())

    def f32s(self, arr):
        self.buf.extend(np.asarray(arr, dtype=np.float64).astype("<f4").tobytes())

    def u32s(self, arr):
        self.buf.extend(np.asarray(arr).astype("<u4").tobytes())


def _read_file(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc


# ── decoder payload ──────────────────────────────────────────────────────


def _write_decoder_block(w: _Writer, decoder: MlpDecoder):
    w.raw(DECODER_MAGIC)
    w.u32(decoder.num_layers)
    for wt, b in zip(decoder.weights, decoder.biases):
        w.u32(wt.shape[0])
        w.u32(wt.shape[1])
        w.f32s(wt.ravel())
        w.f32s(b)


def _read_decoder_block(r: _Reader) -> MlpDecoder:
    r.magic(DECODER_MAGIC)
    n_layers = r.u32()
    if n_layers < 1 or n_layers > 1024:
        r.fail(f"implausible layer count {n_layers}")
    weights, biases = [], []
    for _ in range(n_layers):
        in_dim = r.u32()
        out_dim = r.u32()
        if in_dim < 1 or out_dim < 1 or in_dim * out_dim > 2**28:
            r.fail(f"implausible layer dims {in_dim}x{out_dim}")
        weights.append(r.f32s(in_dim * out_dim).reshape(in_dim, out_dim))
        biases.append(r.f32s(out_dim))
    try:
        return MlpDecoder(weights, biases)
    except ValidationError as exc:
        r.fail(f"inconsistent decoder payload: {exc}")


def save_decoder(decoder: MlpDecoder, path):
    w = _Writer()
    _write_decoder_block(w, decoder)
    Path(path).write_bytes(bytes(w.buf))


def load_decoder(path) -> MlpDecoder:
    r = _Reader(_read_file(path), str(path))
    decoder = _read_decoder_block(r)
    r.done()
    return decoder


# ── map file ─────────────────────────────────────────────────────────────


def save_map(grid: LatentGrid, decoder: MlpDecoder, path):
    """Write the full map (grid config, level payloads, occupancy, decoder)."""
    cfg = grid.config
    body = _Writer()
    body.f64s(cfg.bounds_min)
    body.f64s(cfg.bounds_max)
    body.u32(cfg.num_levels)
    body.f64s(np.array(cfg.cell_sizes))
    body.u32(cfg.feature_dim)
    body.i64(cfg.table_size)
    body.i64(cfg.seed)
    for level in grid.levels:
        body.u8(0 if level.mode == "dense" else 1)
        body.i64(level.num_slots)
        body.f32s(level.features.ravel())
    coords, _ = grid.occupied_vertices()
    body.i64(len(coords))
    body.u32s(coords.ravel())
    _write_decoder_block(body, decoder)

    head = _Writer()
    head.raw(MAP_MAGIC)
    head.u32(MAP_FORMAT_VERSION)
    head.u32(zlib.crc32(bytes(body.buf)))
    Path(path).write_bytes(bytes(head.buf) + bytes(body.buf))


def load_map(path):
    """Read a map file back into (grid, decoder); rejects any corruption."""
    data = _read_file(path)
    r = _Reader(data, str(path))
    r.magic(MAP_MAGIC)
    version = r.u32()
    if version != MAP_FORMAT_VERSION:
        r.fail(f"unsupported format version {version}")
    crc = r.u32()
    body = data[r.off :]
    actual = zlib.crc32(body)
    if actual != crc:
        r.fail(f"checksum mismatch: stored {crc:#010x}, computed {actual:#010x}")

    lo = r.f64s(3)
    hi = r.f64s(3)
    n_levels = r.u32()
    if n_levels < 1 or n_levels > 64:
        r.fail(f"implausible level count {n_levels}")
    cells = tuple(r.f64s(n_levels))
    feature_dim = r.u32()
    table_size = r.i64()
    seed = r.i64()
    try:
        config = GridConfig(lo, hi, cells, feature_dim, table_size, seed)
    except ValidationError as exc:
        r.fail(f"invalid grid config: {exc}")
    grid = LatentGrid(config)

    for li, level in enumerate(grid.levels):
        mode = r.u8()
        nslots = r.i64()
        expected_mode = 0 if level.mode == "dense" else 1
        if mode != expected_mode or nslots != level.num_slots:
            r.fail(
                f"level {li} storage mismatch: file says mode={mode} slots={nslots}, "
                f"config implies mode={expected_mode} slots={level.num_slots}"
            )
        level.features[:] = r.f32s(nslots * feature_dim).reshape(nslots, feature_dim)

    count = r.i64()
    if count < 0 or count > 2**40:
        r.fail(f"implausible occupancy count {count}")
    coords = r.u32s(count * 3).reshape(-1, 3)
    finest = grid.levels[-1]
    if len(coords) and np.any(coords >= finest.dims):
        r.fail("occupancy coordinate outside finest-level dims")
    grid.occupancy = set(map(tuple, coords.tolist()))

    decoder = _read_decoder_block(r)
    r.done()
    if decoder.in_dim != grid.feature_dim:
        raise FormatError(
            f"{path}: decoder expects {decoder.in_dim} inputs but grid encodes "
            f"{grid.feature_dim}"
        )
    return grid, decoder


# ── aggregator weights and tokens ────────────────────────────────────────


def save_aggregator(weights: AggregatorWeights, path):
    w = _Writer()
    w.raw(AGGREGATOR_MAGIC)
    w.i64(weights.seed)
    w.u32(weights.net.num_layers)
    for wt, b in zip(weights.net.weights, weights.net.biases):
        w.u32(wt.shape[0])
        w.u32(wt.shape[1])
        w.f32s(wt.ravel())
        w.f32s(b)
    Path(path).write_bytes(bytes(w.buf))


def load_aggregator(path) -> AggregatorWeights:
    r = _Reader(_read_file(path), str(path))
    r.magic(AGGREGATOR_MAGIC)
    seed = r.i64()
    n_layers = r.u32()
    if n_layers < 1 or n_layers > 1024:
        r.fail(f"implausible layer count {n_layers}")
    weights, biases = [], []
    for _ in range(n_layers):
        in_dim = r.u32()
        out_dim = r.u32()
        if in_dim < 1 or out_dim < 1 or in_dim * out_dim > 2**28:
            r.fail(f"implausible layer dims {in_dim}x{out_dim}")
        weights.append(r.f32s(in_dim * out_dim).reshape(in_dim, out_dim))
        biases.append(r.f32s(out_dim))
    r.done()
    try:
        return AggregatorWeights(MlpDecoder(weights, biases), seed)
    except ValidationError as exc:
        raise FormatError(f"{path}: inconsistent aggregator payload: {exc}") from exc


def save_token(token: MapToken, path, fmt: str = "binary"):
    if fmt == "binary":
        w = _Writer()
        w.raw(TOKEN_MAGIC)
        w.u32(len(token.values))
        w.f32s(token.values)
        Path(path).write_bytes(bytes(w.buf))
    elif fmt == "text":
        lines = [repr(float(v)) for v in token.values]
        Path(path).write_text("\n".join(lines) + "\n")
    else:
        raise ValidationError(f"unknown token format {fmt!r}")


def load_token(path) -> np.ndarray:
    r = _Reader(_read_file(path), str(path))
    r.magic(TOKEN_MAGIC)
    m = r.u32()
    if m < 1 or m > 2**24:
        r.fail(f"implausible token width {m}")
    values = r.f32s(m)
    r.done()
    return values


# ── per-frame binary files ───────────────────────────────────────────────


def write_depth(depth: np.ndarray, path):
    depth = np.asarray(depth, dtype=np.float64)
    w = _Writer()
    w.raw(DEPTH_MAGIC)
    w.u32(depth.shape[0])
    w.u32(depth.shape[1])
    w.f32s(depth.ravel())
    Path(path).write_bytes(bytes(w.buf))


def read_depth(path) -> np.ndarray:
    r = _Reader(_read_file(path), str(path))
    r.magic(DEPTH_MAGIC)
    rows, cols = r.u32(), r.u32()
    if rows < 1 or cols < 1 or rows * cols > 2**28:
        r.fail(f"implausible depth shape {rows}x{cols}")
    out = r.f32s(rows * cols).reshape(rows, cols)
    r.done()
    return out


def write_embeddings(emb: np.ndarray, path):
    emb = np.asarray(emb, dtype=np.float64)
    w = _Writer()
    w.raw(FEAT_MAGIC)
    w.u32(emb.shape[0])
    w.u32(emb.shape[1])
    w.u32(emb.shape[2])
    w.f32s(emb.ravel())
    Path(path).write_bytes(bytes(w.buf))


def read_embeddings(path) -> np.ndarray:
    r = _Reader(_read_file(path), str(path))
    r.magic(FEAT_MAGIC)
    h, wd, k = r.u32(), r.u32(), r.u32()
    if min(h, wd, k) < 1 or h * wd * k > 2**30:
        r.fail(f"implausible embedding shape {h}x{wd}x{k}")
    out = r.f32s(h * wd * k).reshape(h, wd, k)
    r.done()
    return out


def write_mask(mask: np.ndarray, path):
    mask = np.asarray(mask, dtype=np.uint8)
    w = _Writer()
    w.raw(MASK_MAGIC)
    w.u32(mask.shape[0])
    w.u32(mask.shape[1])
    w.raw(mask.tobytes())
    Path(path).write_bytes(bytes(w.buf))


def read_mask(path) -> np.ndarray:
    r = _Reader(_read_file(path), str(path))
    r.magic(MASK_MAGIC)
    h, wd = r.u32(), r.u32()
    if h < 1 or wd < 1 or h * wd > 2**28:
        r.fail(f"implausible mask shape {h}x{wd}")
    out = np.frombuffer(r.take(h * wd), dtype=np.uint8).reshape(h, wd).copy()
    r.done()
    return out


def write_pose(pose: CameraPose, path):
    mat = np.eye(4)
    mat[:3, :3] = pose.rotation
    mat[:3, 3] = pose.translation
    lines = [" ".join(repr(float(v)) for v in row) for row in mat]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose(path) -> CameraPose:
    try:
        values = [float(v) for v in Path(path).read_text().split()]
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot parse pose ({exc})") from exc
    if len(values) != 16:
        raise FormatError(f"{path}: pose needs 16 values, got {len(values)}")
    mat = np.array(values).reshape(4, 4)
    if not np.allclose(mat[3], [0, 0, 0, 1], atol=1e-12):
        raise FormatError(f"{path}: last pose row must be 0 0 0 1")
    try:
        return CameraPose(mat[:3, :3], mat[:3, 3])
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_intrinsics(intr: CameraIntrinsics, path):
    Path(path).write_text(
        f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {intr.patch_stride}\n"
    )


def read_intrinsics(path) -> CameraIntrinsics:
    try:
        parts = Path(path).read_text().split()
        fx, fy, cx, cy = (float(v) for v in parts[:4])
        stride = int(parts[4])
    except (OSError, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: cannot parse intrinsics ({exc})") from exc
    try:
        return CameraIntrinsics(fx, fy, cx, cy, stride)
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ── frame datasets ───────────────────────────────────────────────────────


def write_dataset(frames, out_dir, scene_spec_json: dict | None = None) -> Path:
    """Write frames plus a manifest (and optional scene description) to a dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, frame in enumerate(frames):
        fid = frame.frame_id or f"frame_{i:04d}"
        entry = {
            "id": fid,
            "depth": f"{fid}.depth",
            "embeddings": f"{fid}.feat",
            "pose": f"{fid}.pose.txt",
            "intrinsics": f"{fid}.intr.txt",
            "mask": None,
        }
        write_depth(frame.depth, out / entry["depth"])
        write_embeddings(frame.embeddings, out / entry["embeddings"])
        write_pose(frame.pose, out / entry["pose"])
        write_intrinsics(frame.intrinsics, out / entry["intrinsics"])
        if frame.dynamic_mask is not None:
            entry["mask"] = f"{fid}.mask"
            write_mask(frame.dynamic_mask, out / entry["mask"])
        entries.append(entry)
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"frames": entries}, indent=2) + "\n")
    if scene_spec_json is not None:
        (out / "scene.json").write_text(json.dumps(scene_spec_json, indent=2) + "\n")
    return manifest


def load_dataset(dataset_dir) -> list[CameraFrame]:
    """Read every frame listed in a dataset directory's manifest."""
    root = Path(dataset_dir)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{manifest_path}: cannot parse manifest ({exc})") from exc
    if "frames" not in manifest or not isinstance(manifest["frames"], list):
        raise FormatError(f"{manifest_path}: manifest lacks a 'frames' list")
    frames = []
    for entry in manifest["frames"]:
        try:
            frame = CameraFrame(
                depth=read_depth(root / entry["depth"]),
                embeddings=read_embeddings(root / entry["embeddings"]),
                pose=read_pose(root / entry["pose"]),
                intrinsics=read_intrinsics(root / entry["intrinsics"]),
                dynamic_mask=(
                    read_mask(root / entry["mask"]) if entry.get("mask") else None
                ),
                frame_id=entry["id"],
            )
        except KeyError as exc:
            raise FormatError(f"{manifest_path}: frame entry missing {exc}") from exc
        except ValidationError as exc:
            raise FormatError(f"{manifest_path}: frame {entry.get('id')}: {exc}") from exc
        frames.append(frame)
    return frames


def load_stream(stream_path):
    """Read a stream manifest: ordered (frame | None, grasping) pairs.

    The manifest's ``dataset`` entry points to the frame directory, relative
    to the manifest location.
    """
    path = Path(stream_path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot parse stream manifest ({exc})") from exc
    if "steps" not in manifest:
        raise FormatError(f"{path}: stream manifest lacks 'steps'")
    dataset_dir = path.parent / manifest.get("dataset", ".")
    frames = {f.frame_id: f for f in load_dataset(dataset_dir)}
    steps = []
    for i, step in enumerate(manifest["steps"]):
        fid = step.get("frame")
        if fid is not None and fid not in frames:
            raise FormatError(f"{path}: step {i} references unknown frame {fid!r}")
        steps.append((frames[fid] if fid is not None else None, bool(step.get("grasping"))))
    return steps


def write_stream(steps, path, dataset_rel: str = "."):
    """Write a stream manifest; steps are (frame_id | None, grasping) pairs."""
    payload = {
        "dataset": dataset_rel,
        "steps": [{"frame": fid, "grasping": bool(g)} for fid, g in steps],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


# ── CSV reports ──────────────────────────────────────────────────────────


def write_report_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "updated", "reason", "num_samples", "opt_steps", "mean_loss"])
        for rep in reports:
            mean_loss = float(np.mean(rep.losses)) if rep.losses else ""
            w.writerow(
                [rep.tau, int(rep.updated), rep.reason, rep.num_samples,
                 rep.opt_steps, mean_loss]
            )


def write_loss_csv(losses, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mean_loss"])
        for i, loss in enumerate(losses):
            w.writerow([i, float(loss)])


# ── PCA-colored point-cloud export ───────────────────────────────────────


def power_iteration_pca(data: np.ndarray, n_components: int = 3,
                        iters: int = 100, seed: int = 0) -> np.ndarray:
    """Leading principal directions via seeded power iteration with deflation.

    Returns (n_components, dim) rows. Directions of zero-variance data stay
    at their random unit start, which downstream min-max scaling collapses to
    a constant anyway.
    """
    data = np.asarray(data, dtype=np.float64)
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / max(len(data), 1)
    rng = np.random.default_rng(seed)
    comps = []
    for _ in range(n_components):
        v = rng.normal(size=cov.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(iters):
            nv = cov @ v
            norm = np.linalg.norm(nv)
            if norm < 1e-30:
                break
            v = nv / norm
        lam = float(v @ cov @ v)
        cov = cov - lam * np.outer(v, v)
        comps.append(v)
    return np.stack(comps)


def export_pca_ply(grid: LatentGrid, decoder: MlpDecoder, path, seed: int = 0) -> int:
    """Write occupied vertices as an ASCII PLY colored by feature PCA."""
    positions, feats = decode_occupied(grid, decoder)
    if len(positions) == 0:
        raise EmptyMapError("cannot export an empty map")
    comps = power_iteration_pca(feats, 3, iters=100, seed=seed)
    proj = (feats - feats.mean(axis=0)) @ comps.T
    lo = proj.min(axis=0)
    hi = proj.max(axis=0)
    span = hi - lo
    colors = np.full(proj.shape, 128, dtype=np.uint8)
    ok = span > 1e-30
    scaled = np.zeros_like(proj)
    scaled[:, ok] = (proj[:, ok] - lo[ok]) / span[ok]
    colors[:, ok] = np.clip(np.round(scaled[:, ok] * 255.0), 0, 255).astype(np.uint8)

    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(positions)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(positions, colors):
        lines.append(
            f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
    return len(positions)
