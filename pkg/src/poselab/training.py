"""Training loops for the four model kinds.

All loops share the same skeleton: deterministic per-epoch shuffling from a
seeded stream, batches of graph-built losses, bias-corrected Adam updates,
and one JSON log line per epoch. Teachers and encoders consumed by a loop
enter the graphs as constants, never as parameters, so freezing is
structural rather than a flag.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Graph, NonFiniteError, make_optim, step
from .models import (
    AprModel, Checkpoint, DecoderModel, PaeModel, RprModel, combine_latents,
    model_from_checkpoint,
)
from .posemath import orientation_loss_node, pose_loss_node
from .rng import SplitMix64
from .scene import Dataset, stack_images, stack_positions, stack_quats, stack_scene_ids
from .serial import compact_dumps


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message carries epoch and batch."""


@dataclass
class AprTrainConfig:
    d: int = 64
    epochs: int = 600
    lr: float = 1e-3
    lr_decay: float = 0.05      # final-epoch lr as a fraction of lr
    batch_size: int = 32
    seed: int = 0
    trunk_widths: tuple = (256, 256)
    s_x_init: float = -2.0
    s_q_init: float = -3.0


@dataclass
class PaeTrainConfig:
    # mirrors the teacher's optimizer settings
    levels: int = 2
    epochs: int = 600
    lr: float = 1e-3
    lr_decay: float = 0.05
    batch_size: int = 32
    seed: int = 0
    widths: tuple = (64, 128, 256)
    # latent-match weight against the head-decoded pose terms; retrieval
    # arithmetic needs the full latent matched, not just head-visible parts
    latent_weight: float = 1.0


@dataclass
class DecoderTrainConfig:
    epochs: int = 60
    lr: float = 1e-2
    lr_decay: float = 1.0
    batch_size: int = 32
    seed: int = 0
    combine: str = "sum"
    widths: tuple = (512, 1024, 2048)


@dataclass
class RprTrainConfig:
    d: int = 64
    epochs: int = 60
    lr: float = 1e-3
    lr_decay: float = 1.0
    batch_size: int = 32
    seed: int = 0
    trunk_widths: tuple = (256, 256)
    fuse_width: int = 256


class _EpochLog:
    """Appends one tagged JSON line per epoch; the file may be shared."""

    def __init__(self, path: Path | None, model: str):
        self.path = Path(path) if path is not None else None
        self.model = model
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(compact_dumps({"model": self.model, **record}) + "\n")


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = list(range(n))
    SplitMix64(seed).spawn(epoch).shuffle(order)
    for start in range(0, n, batch_size):
        yield np.array(order[start:start + batch_size])


def _epoch_lr(lr: float, decay: float, epoch: int, epochs: int) -> float:
    """Exponential schedule from lr down to lr*decay at the final epoch."""
    if epochs <= 1 or decay == 1.0:
        return lr
    return lr * decay ** ((epoch - 1) / (epochs - 1))


def _run_epochs(epochs, n, batch_size, seed, batch_fn, log, extra_fn=None,
                optim=None, lr=None, lr_decay=1.0):
    """Shared loop: batch_fn(index_array) -> batch loss; logs epoch means."""
    for epoch in range(1, epochs + 1):
        if optim is not None:
            optim.lr = _epoch_lr(lr, lr_decay, epoch, epochs)
        losses = []
        for b, idx in enumerate(_batches(n, batch_size, seed, epoch)):
            try:
                losses.append(batch_fn(idx))
            except NonFiniteError as err:
                raise TrainingDiverged(
                    f"epoch {epoch} batch {b}: {err}") from err
        record = {"epoch": epoch, "loss": float(np.mean(losses))}
        if extra_fn is not None:
            record.update(extra_fn())
        log.write(record)


def _rowwise_position_nodes(g: Graph, pred: int, target: int, rows: int):
    diff = g.sub(pred, target)
    return [g.l2norm(g.slice_rows(diff, i, i + 1)) for i in range(rows)]


def _rowwise_orientation_nodes(g: Graph, pred: int, target: int, rows: int):
    return [orientation_loss_node(g, g.slice_rows(pred, i, i + 1),
                                  g.slice_rows(target, i, i + 1))
            for i in range(rows)]


def _mean_of(g: Graph, nodes) -> int:
    return g.mean(g.concat(tuple(nodes), axis=0))


def train_apr(dataset: Dataset, cfg: AprTrainConfig,
              log_path: Path | None = None, digest: str = "") -> Checkpoint:
    """Teacher training: uncertainty-weighted pose loss on rendered images."""
    if not dataset.train:
        raise ValueError("dataset has no train samples")
    images = stack_images(dataset.train)
    xs = stack_positions(dataset.train)
    qs = stack_quats(dataset.train)
    model = AprModel.init(cfg.seed, cfg.d, dataset.resolution,
                          cfg.trunk_widths, cfg.s_x_init, cfg.s_q_init)
    names = list(model.params.keys())
    optim = make_optim("adam", list(model.params.values()), lr=cfg.lr)
    log = _EpochLog(log_path, "apr")

    def batch_fn(idx):
        g = Graph()
        pids = {n: g.param(model.params[n]) for n in names}
        out = model.forward_nodes(g, pids, g.constant(images[idx]))
        lx = _mean_of(g, _rowwise_position_nodes(
            g, out["x"], g.constant(xs[idx]), len(idx)))
        lq = _mean_of(g, _rowwise_orientation_nodes(
            g, out["q"], g.constant(qs[idx]), len(idx)))
        loss = pose_loss_node(g, lx, lq, pids["loss.s_x"], pids["loss.s_q"])
        grads = g.backward(loss)
        new = step(optim, [model.params[n] for n in names],
                   [grads[pids[n]] for n in names], names)
        model.params.update(zip(names, new))
        return float(g.value(loss)[0])

    _run_epochs(cfg.epochs, len(dataset.train), cfg.batch_size, cfg.seed,
                batch_fn, log, optim=optim, lr=cfg.lr, lr_decay=cfg.lr_decay)
    return Checkpoint(model.kind, model.params, model.config(), cfg.epochs,
                      digest, _optim_dict(optim, names))


def train_pae(teacher: Checkpoint, dataset: Dataset, cfg: PaeTrainConfig,
              log_path: Path | None = None, digest: str = "") -> Checkpoint:
    """Distill a pose auto-encoder from a frozen teacher.

    The loss matches the teacher's latents and keeps the student decodable
    by the teacher's pose heads, weighted by the teacher's frozen
    uncertainty parameters.
    """
    if teacher.kind != "apr":
        raise ValueError(f"teacher checkpoint kind {teacher.kind!r}, need apr")
    t_model = model_from_checkpoint(teacher)
    scene_ids = sorted({s.scene_id for s in dataset.scenes})
    # normalize positions into the camera workspace before the Fourier lift
    x_scale = float(np.abs(stack_positions(dataset.train)).max())
    student = PaeModel.init(cfg.seed, t_model.d, cfg.levels, scene_ids,
                            cfg.widths, x_scale=x_scale)

    t_out = t_model.infer(stack_images(dataset.train))
    zx_t, zq_t = t_out["z_x"], t_out["z_q"]
    enc_x, enc_q = student.encode_batch(
        [s.pose for s in dataset.train], stack_scene_ids(dataset.train))
    xs = stack_positions(dataset.train)
    qs = stack_quats(dataset.train)
    head = {k: t_model.params[k] for k in
            ("head_x.w", "head_x.b", "head_q.w", "head_q.b")}
    s_x = float(t_model.params["loss.s_x"][0])
    s_q = float(t_model.params["loss.s_q"][0])

    names = list(student.params.keys())
    optim = make_optim("adam", list(student.params.values()), lr=cfg.lr)
    log = _EpochLog(log_path, "pae")
    state = {"latent": float("nan")}

    def batch_fn(idx):
        g = Graph()
        pids = {n: g.param(student.params[n]) for n in names}
        out = student.forward_nodes(g, pids, g.constant(enc_x[idx]),
                                    g.constant(enc_q[idx]))
        dzx = _rowwise_position_nodes(g, out["z_x"], g.constant(zx_t[idx]), len(idx))
        dzq = _rowwise_position_nodes(g, out["z_q"], g.constant(zq_t[idx]), len(idx))
        hx = {k: g.constant(head[k]) for k in head}
        x_dec = g.add(g.matmul(out["z_x"], hx["head_x.w"]), hx["head_x.b"])
        q_dec = g.add(g.matmul(out["z_q"], hx["head_q.w"]), hx["head_q.b"])
        lx = _mean_of(g, _rowwise_position_nodes(
            g, x_dec, g.constant(xs[idx]), len(idx)))
        lq = _mean_of(g, _rowwise_orientation_nodes(
            g, q_dec, g.constant(qs[idx]), len(idx)))
        latent = g.add(_mean_of(g, dzx), _mean_of(g, dzq))
        pose_term = pose_loss_node(g, lx, lq, g.constant([s_x]),
                                   g.constant([s_q]))
        loss = g.add(g.smul(latent, cfg.latent_weight), pose_term)
        grads = g.backward(loss)
        new = step(optim, [student.params[n] for n in names],
                   [grads[pids[n]] for n in names], names)
        student.params.update(zip(names, new))
        state["latent"] = float(g.value(latent)[0])
        return float(g.value(loss)[0])

    _run_epochs(cfg.epochs, len(dataset.train), cfg.batch_size, cfg.seed,
                batch_fn, log, extra_fn=lambda: {"latent": state["latent"]},
                optim=optim, lr=cfg.lr, lr_decay=cfg.lr_decay)
    return Checkpoint(student.kind, student.params, student.config(),
                      cfg.epochs, digest, _optim_dict(optim, names))


def train_decoder(pae: Checkpoint, dataset: Dataset, cfg: DecoderTrainConfig,
                  log_path: Path | None = None, digest: str = "") -> Checkpoint:
    """Fit decode(encode(pose)) to the rendered image under mean absolute error."""
    if pae.kind != "pae":
        raise ValueError(f"encoder checkpoint kind {pae.kind!r}, need pae")
    encoder = model_from_checkpoint(pae)
    decoder = DecoderModel.init(cfg.seed, encoder.d, dataset.resolution,
                                cfg.combine, cfg.widths)

    def codes_for(samples):
        enc_x, enc_q = encoder.encode_batch(
            [s.pose for s in samples], stack_scene_ids(samples))
        z = encoder.infer(enc_x, enc_q)
        return combine_latents(cfg.combine, z["z_x"], z["z_q"])

    train_codes = codes_for(dataset.train)
    train_images = stack_images(dataset.train)
    test_codes = codes_for(dataset.test)
    test_images = stack_images(dataset.test)

    def heldout_l1():
        return float(np.abs(decoder.infer(test_codes) - test_images).mean())

    names = list(decoder.params.keys())
    optim = make_optim("adam", list(decoder.params.values()), lr=cfg.lr)
    log = _EpochLog(log_path, "decoder")
    log.write({"epoch": 0, "heldout_l1": heldout_l1()})  # untrained baseline

    def batch_fn(idx):
        g = Graph()
        pids = {n: g.param(decoder.params[n]) for n in names}
        out = decoder.forward_nodes(g, pids, g.constant(train_codes[idx]))
        loss = g.l1loss(out, g.constant(train_images[idx]))
        grads = g.backward(loss)
        new = step(optim, [decoder.params[n] for n in names],
                   [grads[pids[n]] for n in names], names)
        decoder.params.update(zip(names, new))
        return float(g.value(loss)[0])

    _run_epochs(cfg.epochs, len(dataset.train), cfg.batch_size, cfg.seed,
                batch_fn, log, extra_fn=lambda: {"heldout_l1": heldout_l1()},
                optim=optim, lr=cfg.lr, lr_decay=cfg.lr_decay)
    return Checkpoint(decoder.kind, decoder.params, decoder.config(),
                      cfg.epochs, digest, _optim_dict(optim, names))


def train_rpr(dataset: Dataset, cfg: RprTrainConfig,
              log_path: Path | None = None, digest: str = "") -> Checkpoint:
    """Siamese relative translation training on neighbor and random pairs."""
    n = len(dataset.train)
    if n < 2:
        raise ValueError("relative pose training needs at least 2 train samples")
    images = stack_images(dataset.train)
    xs = stack_positions(dataset.train)
    dists = np.linalg.norm(xs[:, None] - xs[None, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    nearest = dists.argmin(axis=1)

    model = RprModel.init(cfg.seed, cfg.d, dataset.resolution,
                          cfg.trunk_widths, cfg.fuse_width)
    names = list(model.params.keys())
    optim = make_optim("adam", list(model.params.values()), lr=cfg.lr)
    log = _EpochLog(log_path, "rpr")
    pair_seed = SplitMix64(cfg.seed).spawn(1 << 33).seed

    def epoch_pairs(epoch):
        rng = SplitMix64(pair_seed).spawn(epoch)
        pairs = [(i, int(nearest[i])) for i in range(n)]
        for i in range(n):
            j = rng.randint(n - 1)
            pairs.append((i, j + 1 if j >= i else j))
        return pairs

    current = {"pairs": None}

    def batch_fn(idx):
        pairs = [current["pairs"][i] for i in idx]
        first = np.array([p[0] for p in pairs])
        second = np.array([p[1] for p in pairs])
        target = xs[first] - xs[second]
        g = Graph()
        pids = {nm: g.param(model.params[nm]) for nm in names}
        pred = model.forward_nodes(g, pids, g.constant(images[first]),
                                   g.constant(images[second]))
        loss = _mean_of(g, _rowwise_position_nodes(
            g, pred, g.constant(target), len(pairs)))
        grads = g.backward(loss)
        new = step(optim, [model.params[nm] for nm in names],
                   [grads[pids[nm]] for nm in names], names)
        model.params.update(zip(names, new))
        return float(g.value(loss)[0])

    for epoch in range(1, cfg.epochs + 1):
        optim.lr = _epoch_lr(cfg.lr, cfg.lr_decay, epoch, cfg.epochs)
        current["pairs"] = epoch_pairs(epoch)
        losses = []
        for b, idx in enumerate(_batches(len(current["pairs"]),
                                         cfg.batch_size, cfg.seed, epoch)):
            try:
                losses.append(batch_fn(idx))
            except NonFiniteError as err:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {err}") from err
        log.write({"epoch": epoch, "loss": float(np.mean(losses))})
    return Checkpoint(model.kind, model.params, model.config(), cfg.epochs,
                      digest, _optim_dict(optim, names))


def _optim_dict(optim, names) -> dict:
    return {"kind": optim.kind, "lr": optim.lr, "beta1": optim.beta1,
            "beta2": optim.beta2, "eps": optim.eps,
            "weight_decay": optim.weight_decay, "step": optim.step_count,
            "m": dict(zip(names, optim.m)), "v": dict(zip(names, optim.v))}
