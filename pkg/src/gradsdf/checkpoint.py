"""Binary ``NSCK`` checkpoints.

Layout (little-endian): magic ``NSCK``, u32 version, u32 section count, then
per section: u8 name length, name (ASCII), u64 payload length, payload.

Sections: META (config JSON), OCTREE, HASH, MLP, OPTIM, STATE. Readers skip
unknown sections.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_json
from .errors import CheckpointError
from .octree import SemiSparseOctree
from .residual import GradBuffer, HashGridConfig, MlpConfig, ResidualNet
from .sampling import Keyframe, KeyframeStore, observed_octants
from .training import Adam, HybridSdf, TrainState

MAGIC = b"NSCK"
VERSION = 1


def _hash_bytes(net: ResidualNet) -> bytes:
    cfg = net.grid.config
    buf = io.BytesIO()
    buf.write(struct.pack("<III", cfg.levels, cfg.features, cfg.table_size))
    buf.write(struct.pack(f"<{cfg.levels}I", *cfg.resolutions))
    buf.write(struct.pack("<d", cfg.init_scale))
    for table in net.grid.tables:
        buf.write(struct.pack("<II", table.shape[0], table.shape[1]))
        buf.write(table.astype("<f4").tobytes())
    return buf.getvalue()


def _mlp_bytes(net: ResidualNet) -> bytes:
    cfg = net.mlp.config
    buf = io.BytesIO()
    buf.write(struct.pack("<II", cfg.input_dim, len(cfg.hidden)))
    buf.write(struct.pack(f"<{len(cfg.hidden)}I", *cfg.hidden))
    buf.write(struct.pack("<d", cfg.negative_slope))
    for w, b in zip(net.mlp.weights, net.mlp.biases):
        # stored as rows = outputs, cols = inputs, row-major
        wt = np.ascontiguousarray(w.T).astype("<f4")
        buf.write(struct.pack("<II", wt.shape[0], wt.shape[1]))
        buf.write(wt.tobytes())
        buf.write(b.astype("<f4").tobytes())
    return buf.getvalue()


def _optim_bytes(opt: Adam) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<QI", opt.t, len(opt.m)))
    for m, v in zip(opt.m, opt.v):
        buf.write(struct.pack("<B", m.ndim))
        buf.write(struct.pack(f"<{m.ndim}Q", *m.shape))
        buf.write(m.astype("<f8").tobytes())
        buf.write(v.astype("<f8").tobytes())
    return buf.getvalue()


def _state_bytes(state: TrainState) -> bytes:
    ids = state.keyframes.ids()
    head = struct.pack("<QQI", state.step, state.frames_done, len(ids))
    return head + struct.pack(f"<{len(ids)}Q", *ids)


def save_checkpoint(state: TrainState, path) -> None:
    sections = [
        ("META", state.config.to_json().encode()),
        ("OCTREE", state.model.octree.to_bytes()),
        ("HASH", _hash_bytes(state.model.net)),
        ("MLP", _mlp_bytes(state.model.net)),
        ("OPTIM", _optim_bytes(state.optimizer)),
        ("STATE", _state_bytes(state)),
    ]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(sections)))
    for name, payload in sections:
        raw = name.encode("ascii")
        buf.write(struct.pack("<B", len(raw)) + raw)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    Path(path).write_bytes(buf.getvalue())


def read_sections(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint header") from exc
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {VERSION}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<B", data, off)
            name = data[off + 1:off + 1 + n].decode("ascii")
            off += 1 + n
            (size,) = struct.unpack_from("<Q", data, off)
            off += 8
            if off + size > len(data):
                raise CheckpointError(f"section {name} truncated")
            out[name] = data[off:off + size]
            off += size
    except struct.error as exc:
        raise CheckpointError("truncated section table") from exc
    return out


def _load_hash(payload: bytes, net: ResidualNet) -> None:
    levels, feats, tsize = struct.unpack_from("<III", payload, 0)
    off = 12 + 4 * levels + 8
    tables = []
    for _ in range(levels):
        t, f = struct.unpack_from("<II", payload, off)
        off += 8
        tables.append(np.frombuffer(payload, dtype="<f4", count=t * f, offset=off)
                      .reshape(t, f).astype(np.float32))
        off += 4 * t * f
    net.grid.tables = tables


def _load_mlp(payload: bytes, net: ResidualNet) -> None:
    _, n_hidden = struct.unpack_from("<II", payload, 0)
    off = 8 + 4 * n_hidden + 8
    weights, biases = [], []
    for _ in range(n_hidden + 1):
        rows, cols = struct.unpack_from("<II", payload, off)
        off += 8
        wt = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        off += 4 * rows * cols
        b = np.frombuffer(payload, dtype="<f4", count=rows, offset=off)
        off += 4 * rows
        weights.append(np.ascontiguousarray(wt.T).astype(np.float32))
        biases.append(b.astype(np.float32))
    net.mlp.weights, net.mlp.biases = weights, biases


def _load_optim(payload: bytes, opt: Adam) -> None:
    opt.t, count = struct.unpack_from("<QI", payload, 0)
    off = 12
    opt.m, opt.v = [], []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<B", payload, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", payload, off)
        off += 8 * ndim
        size = int(np.prod(shape))
        for target in (opt.m, opt.v):
            target.append(np.frombuffer(payload, dtype="<f8", count=size, offset=off)
                          .reshape(shape).copy())
            off += 8 * size


def load_checkpoint(path, frames=None) -> TrainState:
    """Rebuild a training state; keyframes are re-attached from ``frames`` by id."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    sec = read_sections(data)
    for name in ("META", "OCTREE", "HASH", "MLP"):
        if name not in sec:
            raise CheckpointError(f"checkpoint lacks section {name}")
    try:
        config = config_from_json(sec["META"].decode())
        tree = SemiSparseOctree.from_bytes(sec["OCTREE"])
        oc = config.octree
        net = ResidualNet(config.hashgrid, config.mlp, oc.root_min, oc.side, seed=None)
        _load_hash(sec["HASH"], net)
        _load_mlp(sec["MLP"], net)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    model = HybridSdf(tree, net, config.residual, config.gradient_augmented)
    grads = GradBuffer.for_net(net, tree.num_vertices)
    opt = Adam(config.train, len(net.param_arrays()))
    state = TrainState(config, model, grads, opt)
    if "OPTIM" in sec:
        _load_optim(sec["OPTIM"], opt)
    if "STATE" in sec:
        payload = sec["STATE"]
        state.step, state.frames_done, n_kf = struct.unpack_from("<QQI", payload, 0)
        ids = struct.unpack_from(f"<{n_kf}Q", payload, 20)
        if n_kf and frames is not None:
            by_id = {f.id: f for f in frames}
            missing = [i for i in ids if i not in by_id]
            if missing:
                raise CheckpointError(f"keyframes {missing} not present in the frame stream")
            for i in ids:
                fr = by_id[i].clipped(oc.root)
                state.keyframes.keyframes.append(Keyframe(fr, observed_octants(fr, tree)))
    return state
