"""Binary frame files, manifests, PLY meshes, SDF slices and batch dumps."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import yaml

from .errors import GradSdfError, SceneError
from .geometry import AnalyticScene, Frame, scene_from_dict

FRAME_MAGIC = b"NSDF"
SLICE_MAGIC = b"NSLC"
BATCH_MAGIC = b"NSDB"
VERSION = 1


class FormatError(GradSdfError, ValueError):
    pass


# ---------------------------------------------------------------- frames

def frame_to_bytes(frame: Frame) -> bytes:
    pts = np.asarray(frame.points, dtype="<f4")
    head = FRAME_MAGIC + struct.pack("<I3dI", VERSION, *frame.origin, pts.shape[0])
    return head + pts.tobytes()


def frame_from_bytes(data: bytes, frame_id: int = 0) -> Frame:
    if data[:4] != FRAME_MAGIC:
        raise FormatError(f"bad frame magic {data[:4]!r}")
    version, ox, oy, oz, count = struct.unpack_from("<I3dI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported frame version {version}")
    pts = np.frombuffer(data, dtype="<f4", count=3 * count, offset=36).reshape(count, 3)
    return Frame((ox, oy, oz), pts.astype(np.float64), id=frame_id)


def write_frames(frames, out_dir, manifest_name: str = "manifest.txt") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for fr in frames:
        name = f"frame_{fr.id:05d}.nsdf"
        (out / name).write_bytes(frame_to_bytes(fr))
        names.append(name)
    manifest = out / manifest_name
    manifest.write_text("".join(n + "\n" for n in names))
    return manifest


def read_manifest(path) -> list:
    """Frames listed in a manifest (paths relative to it), ids in stream order."""
    path = Path(path)
    frames = []
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    for i, name in enumerate(ln for ln in lines if ln and not ln.startswith("#")):
        frames.append(frame_from_bytes((path.parent / name).read_bytes(), frame_id=i))
    return frames


# ----------------------------------------------------------------- scene

def load_scene(path) -> AnalyticScene:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise SceneError(f"cannot read scene {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SceneError("scene file must hold a mapping")
    return scene_from_dict(doc)


def shipped_scene_path(name: str = "room") -> Path:
    return Path(__file__).with_name("data") / f"{name}.yaml"


def shipped_scene(name: str = "room") -> AnalyticScene:
    return load_scene(shipped_scene_path(name))


# ------------------------------------------------------------------ mesh

def write_ply(mesh, path) -> None:
    """Binary little-endian PLY with float32 positions and int32 face indices."""
    verts = np.asarray(mesh.vertices, dtype="<f4")
    faces = np.asarray(mesh.faces, dtype="<i4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(verts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(faces)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    ).encode("ascii")
    rec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", 3)])
    rec["n"], rec["idx"] = 3, faces
    Path(path).write_bytes(header + verts.tobytes() + rec.tobytes())


def read_ply(path):
    from .evalkit import TriMesh

    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    verts = np.frombuffer(data, dtype="<f4", count=3 * nv, offset=end).reshape(nv, 3)
    rec = np.frombuffer(data, dtype=[("n", "u1"), ("idx", "<i4", 3)], count=nf,
                        offset=end + 12 * nv)
    return TriMesh(verts.astype(np.float64), rec["idx"].astype(np.int64))


# ----------------------------------------------------------------- slice

def write_slice(path, origin, z: float, values, resolution: float) -> None:
    """``values`` has shape (ny, nx); stored row-major with x fastest."""
    vals = np.asarray(values, dtype="<f4")
    ny, nx = vals.shape
    head = SLICE_MAGIC + struct.pack("<I3ddIId", VERSION, *origin, z, nx, ny, resolution)
    Path(path).write_bytes(head + vals.tobytes())


def read_slice(path):
    data = Path(path).read_bytes()
    if data[:4] != SLICE_MAGIC:
        raise FormatError(f"bad slice magic {data[:4]!r}")
    version, ox, oy, oz, z, nx, ny, res = struct.unpack_from("<I3ddIId", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported slice version {version}")
    off = 4 + struct.calcsize("<I3ddIId")
    vals = np.frombuffer(data, dtype="<f4", count=nx * ny, offset=off).reshape(ny, nx)
    return {"origin": np.array([ox, oy, oz]), "z": z, "resolution": res,
            "values": vals.astype(np.float64)}


# ------------------------------------------------------------ batch dumps

def batch_to_bytes(batch) -> bytes:
    """Surface, perturbed and free records in that order: f32[3] point, f32 target, i8 sign.

    Surface records carry target 0 and sign 0; free-space records sign +1.
    """
    n_s, n_p, n_f = len(batch.surface), len(batch.perturbed), len(batch.free)
    rec = np.zeros(n_s + n_p + n_f, dtype=[("p", "<f4", 3), ("d", "<f4"), ("s", "i1")])
    rec["p"] = np.concatenate([batch.surface, batch.perturbed, batch.free]).reshape(-1, 3)
    rec["d"][n_s:n_s + n_p] = batch.perturbed_target
    rec["d"][n_s + n_p:] = batch.free_target
    rec["s"][n_s:n_s + n_p] = batch.perturbed_sign
    rec["s"][n_s + n_p:] = 1
    head = BATCH_MAGIC + struct.pack("<I3dIII", VERSION, 0.0, 0.0, 0.0, n_s, n_p, n_f)
    return head + rec.tobytes()


def batch_from_bytes(data: bytes) -> dict:
    if data[:4] != BATCH_MAGIC:
        raise FormatError(f"bad batch magic {data[:4]!r}")
    version, _, _, _, n_s, n_p, n_f = struct.unpack_from("<I3dIII", data, 4)
    off = 4 + struct.calcsize("<I3dIII")
    rec = np.frombuffer(data, dtype=[("p", "<f4", 3), ("d", "<f4"), ("s", "i1")],
                        count=n_s + n_p + n_f, offset=off)
    return {"counts": (n_s, n_p, n_f), "points": rec["p"].astype(np.float64),
            "target": rec["d"].astype(np.float64), "sign": rec["s"].astype(np.int64)}
