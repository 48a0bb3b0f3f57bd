"""Trainable models and checkpoint persistence.

Four model kinds share one convention: named float64 parameter arrays in a
fixed-order dict plus a structure config, with a single graph-forward
implementation used both for training (parameters as graph leaves) and for
batched inference (parameters as constants). Widths are configurable so the
same structures can be gradient-checked at small sizes; defaults match the
shipped configuration.

- pose regressor (teacher): image -> trunk -> latent branches -> pose heads
- pose auto-encoder (student): Fourier-encoded pose -> per-part MLP -> latents
- image decoder: combined latent -> widening MLP -> clamped image
- relative translation regressor: Siamese trunk -> fused features -> delta x
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .posemath import FourierSpec, LatentPair, Pose, fourier_encode, make_pose
from .rng import SplitMix64
from .serial import canonical_dumps

TRUNK_WIDTHS = (256, 256)
PAE_WIDTHS = (64, 128, 256)
DECODER_WIDTHS = (512, 1024, 2048)
FUSE_WIDTH = 256
COMBINE_MODES = ("sum", "concat")

CKPT_MAGIC = b"PLCKPT01"


def _init_params(seed: int, layers) -> dict:
    """He-scaled weights, zero biases; one child stream per layer."""
    base = SplitMix64(seed)
    params = {}
    for idx, (name, fan_in, fan_out) in enumerate(layers):
        rng = base.spawn(idx)
        scale = np.sqrt(2.0 / fan_in)
        params[f"{name}.w"] = (
            scale * np.array(rng.normals(fan_in * fan_out)).reshape(fan_in, fan_out))
        params[f"{name}.b"] = np.zeros((1, fan_out))
    return params


def _affine(g: Graph, pids: dict, x: int, name: str) -> int:
    return g.add(g.matmul(x, pids[f"{name}.w"]), pids[f"{name}.b"])


def _chain(g: Graph, pids: dict, x: int, names, relu_mask) -> int:
    for name, use_relu in zip(names, relu_mask):
        x = _affine(g, pids, x, name)
        if use_relu:
            x = g.relu(x)
    return x


def _constant_pids(g: Graph, params: dict) -> dict:
    return {name: g.constant(arr) for name, arr in params.items()}


def _param_pids(g: Graph, params: dict) -> dict:
    return {name: g.param(arr) for name, arr in params.items()}


class AprModel:
    """Absolute pose regressor: flattened image to latent pair and pose."""

    kind = "apr"

    def __init__(self, params: dict, d: int, resolution: int,
                 trunk_widths=TRUNK_WIDTHS):
        self.params = params
        self.d = d
        self.resolution = resolution
        self.trunk_widths = tuple(trunk_widths)

    @classmethod
    def init(cls, seed: int, d: int = 64, resolution: int = 32,
             trunk_widths=TRUNK_WIDTHS, s_x: float = 0.0, s_q: float = -3.0):
        t0, t1 = trunk_widths
        params = _init_params(seed, [
            ("trunk0", 3 * resolution * resolution, t0), ("trunk1", t0, t1),
            ("branch_x", t1, d), ("branch_q", t1, d),
            ("head_x", d, 3), ("head_q", d, 4),
        ])
        # Identity-quaternion bias keeps the raw head output away from zero
        # norm, where the in-loss normalization is undefined.
        params["head_q.b"] = np.array([[1.0, 0.0, 0.0, 0.0]])
        params["loss.s_x"] = np.array([s_x])
        params["loss.s_q"] = np.array([s_q])
        return cls(params, d, resolution, trunk_widths)

    def config(self) -> dict:
        return {"d": self.d, "resolution": self.resolution,
                "trunk_widths": list(self.trunk_widths)}

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint"):
        c = ckpt.config
        return cls(ckpt.params, int(c["d"]), int(c["resolution"]),
                   tuple(c["trunk_widths"]))

    def forward_nodes(self, g: Graph, pids: dict, images: int) -> dict:
        h = _chain(g, pids, images, ("trunk0", "trunk1"), (True, True))
        zx = g.relu(_affine(g, pids, h, "branch_x"))
        zq = g.relu(_affine(g, pids, h, "branch_q"))
        return {"z_x": zx, "z_q": zq,
                "x": _affine(g, pids, zx, "head_x"),
                "q": _affine(g, pids, zq, "head_q")}

    def infer(self, images: np.ndarray) -> dict:
        """Batched inference; images (n, 3*res*res) in [0,1]."""
        g = Graph()
        out = self.forward_nodes(g, _constant_pids(g, self.params),
                                 g.constant(images))
        return {k: g.value(v) for k, v in out.items()}


def apr_forward(model: AprModel, image: np.ndarray):
    """Single image to (LatentPair, Pose); q normalized at output."""
    flat = np.asarray(image, dtype=np.float64).reshape(-1)
    expected = 3 * model.resolution * model.resolution
    if flat.size != expected:
        raise ValueError(f"image has {flat.size} values, model expects "
                         f"{expected} (resolution {model.resolution})")
    out = model.infer(flat.reshape(1, -1))
    return (LatentPair(out["z_x"][0], out["z_q"][0]),
            make_pose(out["x"][0], out["q"][0]))


class PaeModel:
    """Pose auto-encoder: Fourier-encoded pose (and scene) to latent pair.

    Positions are divided by x_scale before the sinusoidal lift so the
    lowest frequency spans the camera workspace; raw meter coordinates
    would alias every level against the training-sample spacing.
    """

    kind = "pae"

    def __init__(self, params: dict, d: int, levels: int, scene_ids,
                 widths=PAE_WIDTHS, x_scale: float = 1.0):
        self.params = params
        self.d = d
        self.levels = levels
        self.scene_ids = tuple(int(s) for s in scene_ids)
        self.widths = tuple(widths)
        if not (math.isfinite(x_scale) and x_scale > 0.0):
            raise ValueError(f"x_scale must be positive, got {x_scale}")
        self.x_scale = float(x_scale)
        self.spec = FourierSpec(levels=levels)

    @property
    def multi_scene(self) -> bool:
        return len(self.scene_ids) > 1

    def input_lengths(self) -> tuple:
        w = 2 * self.levels + 1
        scene_extra = w if self.multi_scene else 0
        return 3 * w + scene_extra, 4 * w + scene_extra

    @classmethod
    def init(cls, seed: int, d: int = 64, levels: int = 6, scene_ids=(0,),
             widths=PAE_WIDTHS, x_scale: float = 1.0):
        model = cls({}, d, levels, scene_ids, widths, x_scale)
        in_x, in_q = model.input_lengths()
        layers = []
        for part, first in (("x", in_x), ("q", in_q)):
            dims = [first, *widths, d]
            layers += [(f"mlp_{part}{i}", dims[i], dims[i + 1])
                       for i in range(len(dims) - 1)]
        model.params = _init_params(seed, layers)
        return model

    def config(self) -> dict:
        return {"d": self.d, "levels": self.levels,
                "scene_ids": list(self.scene_ids), "widths": list(self.widths),
                "x_scale": self.x_scale}

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint"):
        c = ckpt.config
        return cls(ckpt.params, int(c["d"]), int(c["levels"]),
                   tuple(c["scene_ids"]), tuple(c["widths"]),
                   float(c.get("x_scale", 1.0)))

    def encode_inputs(self, pose: Pose, scene_id: int) -> tuple:
        """Fourier features of x and q, with the scene feature when multi-scene."""
        vx = fourier_encode(pose.x / self.x_scale, self.spec)
        vq = fourier_encode(pose.q, self.spec)
        if self.multi_scene:
            if int(scene_id) not in self.scene_ids:
                raise ValueError(f"unknown scene id {scene_id}; "
                                 f"model knows {self.scene_ids}")
            frac = self.scene_ids.index(int(scene_id)) / len(self.scene_ids)
            vs = fourier_encode(np.array([frac]), self.spec)
            return np.concatenate([vx, vs]), np.concatenate([vq, vs])
        return vx, vq

    def encode_batch(self, poses, scene_ids) -> tuple:
        rows = [self.encode_inputs(p, s) for p, s in zip(poses, scene_ids)]
        return (np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows]))

    def forward_nodes(self, g: Graph, pids: dict, in_x: int, in_q: int) -> dict:
        names_x = [f"mlp_x{i}" for i in range(4)]
        names_q = [f"mlp_q{i}" for i in range(4)]
        return {"z_x": _chain(g, pids, in_x, names_x, (True,) * 4),
                "z_q": _chain(g, pids, in_q, names_q, (True,) * 4)}

    def infer(self, enc_x: np.ndarray, enc_q: np.ndarray) -> dict:
        g = Graph()
        out = self.forward_nodes(g, _constant_pids(g, self.params),
                                 g.constant(enc_x), g.constant(enc_q))
        return {k: g.value(v) for k, v in out.items()}


def pae_forward(model: PaeModel, pose: Pose, scene_id: int = 0) -> LatentPair:
    vx, vq = model.encode_inputs(pose, scene_id)
    out = model.infer(vx.reshape(1, -1), vq.reshape(1, -1))
    return LatentPair(out["z_x"][0], out["z_q"][0])


def combine_latents(mode: str, z_x: np.ndarray, z_q: np.ndarray) -> np.ndarray:
    if mode == "sum":
        return z_x + z_q
    if mode == "concat":
        return np.concatenate([z_x, z_q], axis=-1)
    raise ValueError(f"combine mode must be one of {COMBINE_MODES}, got {mode!r}")


class DecoderModel:
    """Latent code to image; final affine output clamped to [0, 1]."""

    kind = "decoder"

    def __init__(self, params: dict, d: int, resolution: int,
                 combine: str = "sum", widths=DECODER_WIDTHS):
        if combine not in COMBINE_MODES:
            raise ValueError(f"combine mode must be one of {COMBINE_MODES}")
        self.params = params
        self.d = d
        self.resolution = resolution
        self.combine = combine
        self.widths = tuple(widths)

    @property
    def in_dim(self) -> int:
        return self.d * (2 if self.combine == "concat" else 1)

    @classmethod
    def init(cls, seed: int, d: int = 64, resolution: int = 32,
             combine: str = "sum", widths=DECODER_WIDTHS):
        model = cls({}, d, resolution, combine, widths)
        dims = [model.in_dim, *widths, 3 * resolution * resolution]
        model.params = _init_params(seed, [
            (f"dec{i}", dims[i], dims[i + 1]) for i in range(len(dims) - 1)])
        return model

    def config(self) -> dict:
        return {"d": self.d, "resolution": self.resolution,
                "combine": self.combine, "widths": list(self.widths)}

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint"):
        c = ckpt.config
        return cls(ckpt.params, int(c["d"]), int(c["resolution"]),
                   str(c["combine"]), tuple(c["widths"]))

    def forward_nodes(self, g: Graph, pids: dict, codes: int) -> int:
        n = len(self.widths) + 1
        names = [f"dec{i}" for i in range(n)]
        raw = _chain(g, pids, codes, names, (True,) * (n - 1) + (False,))
        # clamp01(x) = relu(x) - relu(x - 1), differentiable off the kinks
        shifted = g.add(raw, g.constant([-1.0]))
        return g.sub(g.relu(raw), g.relu(shifted))

    def infer(self, codes: np.ndarray) -> np.ndarray:
        g = Graph()
        out = self.forward_nodes(g, _constant_pids(g, self.params),
                                 g.constant(codes))
        return g.value(out)


def decode_image(decoder: DecoderModel, pae: PaeModel, pose: Pose,
                 scene_id: int = 0) -> np.ndarray:
    """Decode the PAE encoding of a pose into an H x W x 3 image."""
    if decoder.d != pae.d:
        raise ValueError(f"decoder d={decoder.d} but encoder d={pae.d}")
    z = pae_forward(pae, pose, scene_id)
    code = combine_latents(decoder.combine, z.z_x, z.z_q)
    flat = decoder.infer(code.reshape(1, -1))[0]
    res = decoder.resolution
    return flat.reshape(res, res, 3)


class RprModel:
    """Siamese relative translation regressor: two images to x_first - x_second."""

    kind = "rpr"

    def __init__(self, params: dict, d: int, resolution: int,
                 trunk_widths=TRUNK_WIDTHS, fuse_width: int = FUSE_WIDTH):
        self.params = params
        self.d = d
        self.resolution = resolution
        self.trunk_widths = tuple(trunk_widths)
        self.fuse_width = fuse_width

    @classmethod
    def init(cls, seed: int, d: int = 64, resolution: int = 32,
             trunk_widths=TRUNK_WIDTHS, fuse_width: int = FUSE_WIDTH):
        t0, t1 = trunk_widths
        params = _init_params(seed, [
            ("trunk0", 3 * resolution * resolution, t0), ("trunk1", t0, t1),
            ("fuse0", 2 * t1, fuse_width), ("fuse1", fuse_width, d),
            ("head", d, 3),
        ])
        return cls(params, d, resolution, trunk_widths, fuse_width)

    def config(self) -> dict:
        return {"d": self.d, "resolution": self.resolution,
                "trunk_widths": list(self.trunk_widths),
                "fuse_width": self.fuse_width}

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint"):
        c = ckpt.config
        return cls(ckpt.params, int(c["d"]), int(c["resolution"]),
                   tuple(c["trunk_widths"]), int(c["fuse_width"]))

    def forward_nodes(self, g: Graph, pids: dict, first: int, second: int) -> int:
        fa = _chain(g, pids, first, ("trunk0", "trunk1"), (True, True))
        fb = _chain(g, pids, second, ("trunk0", "trunk1"), (True, True))
        fused = g.concat((fa, fb), axis=1)
        fused = _chain(g, pids, fused, ("fuse0", "fuse1"), (True, True))
        return _affine(g, pids, fused, "head")

    def infer(self, first: np.ndarray, second: np.ndarray) -> np.ndarray:
        g = Graph()
        out = self.forward_nodes(g, _constant_pids(g, self.params),
                                 g.constant(first), g.constant(second))
        return g.value(out)


def rpr_forward(model: RprModel, image_first: np.ndarray,
                image_second: np.ndarray) -> np.ndarray:
    """World-frame translation estimate x_first - x_second for one pair."""
    a = np.asarray(image_first, dtype=np.float64).reshape(1, -1)
    b = np.asarray(image_second, dtype=np.float64).reshape(1, -1)
    expected = 3 * model.resolution * model.resolution
    if a.size != expected or b.size != expected:
        raise ValueError(f"images must have {expected} values each")
    return model.infer(a, b)[0]


MODEL_CLASSES = {cls.kind: cls for cls in (AprModel, PaeModel, DecoderModel,
                                           RprModel)}


def model_from_checkpoint(ckpt: "Checkpoint"):
    if ckpt.kind not in MODEL_CLASSES:
        raise ValueError(f"unknown checkpoint kind {ckpt.kind!r}")
    return MODEL_CLASSES[ckpt.kind].from_checkpoint(ckpt)


# -- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Snapshot of a model plus its optimizer state and config digest."""
    kind: str
    params: dict
    config: dict
    epoch: int
    digest: str
    optim: dict | None = None


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": ckpt.kind, "epoch": ckpt.epoch, "digest": ckpt.digest,
        "config": ckpt.config,
        "params": [{"name": n, "shape": list(a.shape)}
                   for n, a in ckpt.params.items()],
        "optim": None,
    }
    blobs = list(ckpt.params.values())
    if ckpt.optim is not None:
        o = ckpt.optim
        names = list(ckpt.params.keys())
        header["optim"] = {k: o[k] for k in
                           ("kind", "lr", "beta1", "beta2", "eps",
                            "weight_decay", "step")}
        header["optim"]["arrays"] = ([f"m:{n}" for n in names]
                                     + [f"v:{n}" for n in names])
        blobs += [o["m"][n] for n in names] + [o["v"][n] for n in names]
    head = canonical_dumps(header).encode()
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    offset = 16 + hlen
    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        return arr.reshape(shape).copy()
    params = {e["name"]: take(tuple(e["shape"])) for e in header["params"]}
    optim = None
    if header["optim"] is not None:
        o = dict(header["optim"])
        arrays = {name: take(params[name.split(":", 1)[1]].shape)
                  for name in o.pop("arrays")}
        o["m"] = {n: arrays[f"m:{n}"] for n in params}
        o["v"] = {n: arrays[f"v:{n}"] for n in params}
        optim = o
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(header["kind"], params, header["config"],
                      int(header["epoch"]), header["digest"], optim)
