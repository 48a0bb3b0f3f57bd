"""Operator commands: dataset generation, training, and experiments.

Every command works inside one run directory (runs/<name>/ by default).
The resolved config is written there as config.json and its sha256 digest
travels inside every checkpoint and report; a digest mismatch between the
current config and stored artifacts aborts unless --force, which also
rewrites config.json so later commands line up again.

Exit codes: 0 success, 1 validation failure, 2 numerical abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .autodiff import NonFiniteError
from .config import (RunConfig, apply_overrides, config_digest,
                     config_from_dict, load_config)
from .experiments import (ablate_fourier_report, decoder_report, eval_report,
                          orientation_affine_report, random_guess_report,
                          refine_report, rpr_report, timing_summary,
                          virtual_rpr_report)
from .models import load_checkpoint, save_checkpoint
from .refine import (PoseDatabase, RefineConfig, RefineDiverged, load_pose_db,
                     save_pose_db)
from .reports import Report, read_report, render_report, write_report
from .rng import SplitMix64
from .scene import build_dataset, generate_scene, load_dataset
from .serial import canonical_dumps, read_json, write_json
from .training import (AprTrainConfig, DecoderTrainConfig, PaeTrainConfig,
                       RprTrainConfig, TrainingDiverged, train_apr,
                       train_decoder, train_pae, train_rpr)

_SCENE_STREAM = 1 << 34
ABLATION_LEVELS = (0, 2, 6)


class UsageError(ValueError):
    """Bad invocation or inconsistent artifacts; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- run directory plumbing ----------------------------------------------------

def _resolve_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
        if args.run is not None:
            cfg = dataclasses.replace(cfg, name=args.run)
    else:
        name = args.run if args.run is not None else "default"
        stored = Path(args.out_root) / name / "config.json"
        if stored.exists():
            cfg = load_config(stored)
            cfg = dataclasses.replace(cfg, name=name, out_root=args.out_root)
        else:
            cfg = RunConfig(name=name, out_root=args.out_root)
    return apply_overrides(cfg, args.set or [])


def _write_config(cfg: RunConfig) -> None:
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(canonical_dumps(cfg.as_dict()) + "\n")


def _check_run_config(cfg: RunConfig, digest: str, force: bool) -> None:
    """Compare against the run's stored config.json."""
    stored = cfg.run_dir() / "config.json"
    if not stored.exists():
        raise UsageError(f"missing {stored}; run gen-scene first")
    stored_digest = config_digest(config_from_dict(read_json(stored)))
    if stored_digest != digest:
        if not force:
            raise UsageError(
                f"config digest {digest[:12]} does not match stored "
                f"{stored_digest[:12]} in {stored}; rerun upstream commands "
                "or pass --force to adopt the current config")
        _write_config(cfg)


def _load_ckpt(cfg: RunConfig, model: str, digest: str, force: bool):
    path = cfg.run_dir() / f"{model}.ckpt"
    if not path.exists():
        raise UsageError(f"missing {path}; run train-{model} first")
    ckpt = load_checkpoint(path)
    if ckpt.digest != digest and not force:
        raise UsageError(
            f"{path} was trained under config {ckpt.digest[:12]}, current is "
            f"{digest[:12]}; retrain or pass --force")
    return ckpt


def _load_run_dataset(cfg: RunConfig):
    path = cfg.run_dir() / "dataset"
    if not (path / "meta.json").exists():
        raise UsageError(f"missing dataset under {path}; run gen-scene first")
    return load_dataset(path)


def _load_db(cfg: RunConfig) -> PoseDatabase:
    path = cfg.run_dir() / "poses.db.json"
    if not path.exists():
        raise UsageError(f"missing {path}; run gen-scene first")
    return load_pose_db(path)


def _strip_log_lines(cfg: RunConfig, model: str) -> None:
    """Drop a model's previous curve so re-training is idempotent."""
    path = cfg.run_dir() / "log.jsonl"
    if path.exists():
        kept = [line for line in path.read_text().splitlines()
                if f'"model":"{model}"' not in line]
        path.write_text("".join(line + "\n" for line in kept))


def _refine_config(cfg: RunConfig) -> RefineConfig:
    return RefineConfig(k=cfg.k, outer=cfg.outer, inner=cfg.inner,
                        lr=cfg.refine_lr,
                        weight_decay=cfg.refine_weight_decay,
                        mode=cfg.refine_mode)


def _emit(cfg: RunConfig, report: Report, stem: str | None = None) -> None:
    path = write_report(report, cfg.run_dir() / "reports", stem)
    sys.stdout.write(render_report(report))
    sys.stdout.write(f"wrote {path}\n")


def _write_timing(cfg: RunConfig, kind: str, timings_ms: list) -> None:
    path = cfg.run_dir() / "reports" / f"timing.{kind}.json"
    write_json(path, timing_summary(timings_ms))
    sys.stdout.write(f"wrote {path}\n")


# -- commands -------------------------------------------------------------------

def cmd_gen_scene(cfg: RunConfig, args) -> int:
    root = SplitMix64(cfg.seed)
    half = cfg.resolution / 2.0
    scenes = [
        generate_scene(root.spawn(_SCENE_STREAM + j).seed, cfg.n_landmarks,
                       cfg.extent, scene_id=j, focal=cfg.focal,
                       principal=(half, half), point_radius=cfg.point_radius)
        for j in range(cfg.n_scenes)
    ]
    dataset = build_dataset(scenes, cfg.n_train, cfg.n_test, cfg.resolution,
                            cfg.seed, out_dir=cfg.run_dir() / "dataset",
                            mode=cfg.pose_mode)
    save_pose_db(PoseDatabase.from_dataset(dataset),
                 cfg.run_dir() / "poses.db.json")
    _write_config(cfg)
    digest = config_digest(cfg)
    rows = [{"scene": s.scene_id, "n": cfg.n_train + cfg.n_test,
             "landmarks": len(s.points), "extent": s.extent,
             "pose_mode": cfg.pose_mode} for s in scenes]
    _emit(cfg, Report("gen-scene", digest, rows))
    return 0


def cmd_train_apr(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    _check_run_config(cfg, digest, args.force)
    dataset = _load_run_dataset(cfg)
    _strip_log_lines(cfg, "apr")
    train_cfg = AprTrainConfig(d=cfg.d, epochs=cfg.apr_epochs, lr=cfg.apr_lr,
                               lr_decay=cfg.apr_lr_decay,
                               batch_size=cfg.batch_size, seed=cfg.seed,
                               s_x_init=cfg.s_x_init, s_q_init=cfg.s_q_init)
    ckpt = train_apr(dataset, train_cfg, log_path=cfg.run_dir() / "log.jsonl",
                     digest=digest)
    save_checkpoint(ckpt, cfg.run_dir() / "apr.ckpt")
    report = eval_report(dataset, ckpt, None, digest)
    _emit(cfg, Report("train-apr", digest, report.rows))
    return 0


def cmd_train_pae(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    _check_run_config(cfg, digest, args.force)
    dataset = _load_run_dataset(cfg)
    teacher = _load_ckpt(cfg, "apr", digest, args.force)
    _strip_log_lines(cfg, "pae")
    train_cfg = PaeTrainConfig(levels=cfg.levels, epochs=cfg.pae_epochs,
                               lr=cfg.pae_lr, lr_decay=cfg.pae_lr_decay,
                               batch_size=cfg.batch_size, seed=cfg.seed,
                               latent_weight=cfg.pae_latent_weight)
    ckpt = train_pae(teacher, dataset, train_cfg,
                     log_path=cfg.run_dir() / "log.jsonl", digest=digest)
    save_checkpoint(ckpt, cfg.run_dir() / "pae.ckpt")
    report = eval_report(dataset, teacher, ckpt, digest)
    _emit(cfg, Report("train-pae", digest, report.rows))
    return 0


def cmd_train_decoder(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    _check_run_config(cfg, digest, args.force)
    dataset = _load_run_dataset(cfg)
    pae = _load_ckpt(cfg, "pae", digest, args.force)
    _strip_log_lines(cfg, "decoder")
    train_cfg = DecoderTrainConfig(epochs=cfg.decoder_epochs,
                                   lr=cfg.decoder_lr,
                                   lr_decay=cfg.decoder_lr_decay,
                                   batch_size=cfg.batch_size, seed=cfg.seed,
                                   combine=cfg.decoder_combine)
    ckpt = train_decoder(pae, dataset, train_cfg,
                         log_path=cfg.run_dir() / "log.jsonl", digest=digest)
    save_checkpoint(ckpt, cfg.run_dir() / "decoder.ckpt")
    report = decoder_report(dataset, pae, ckpt, train_cfg, digest)
    _emit(cfg, Report("train-decoder", digest, report.rows))
    return 0


def cmd_train_rpr(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    _check_run_config(cfg, digest, args.force)
    dataset = _load_run_dataset(cfg)
    _strip_log_lines(cfg, "rpr")
    train_cfg = RprTrainConfig(d=cfg.d, epochs=cfg.rpr_epochs, lr=cfg.rpr_lr,
                               lr_decay=cfg.rpr_lr_decay,
                               batch_size=cfg.batch_size, seed=cfg.seed)
    ckpt = train_rpr(dataset, train_cfg, log_path=cfg.run_dir() / "log.jsonl",
                     digest=digest)
    save_checkpoint(ckpt, cfg.run_dir() / "rpr.ckpt")
    _emit(cfg, rpr_report(dataset, ckpt, digest))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    _check_run_config(cfg, digest, args.force)
    dataset = _load_run_dataset(cfg)
    apr = _load_ckpt(cfg, "apr", digest, args.force)
    pae = None
    if (cfg.run_dir() / "pae.ckpt").exists():
        pae = _load_ckpt(cfg, "pae", digest, args.force)
    _emit(cfg, eval_report(dataset, apr, pae, digest))
    return 0


def cmd_refine(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    _check_run_config(cfg, digest, args.force)
    dataset = _load_run_dataset(cfg)
    apr = _load_ckpt(cfg, "apr", digest, args.force)
    pae = _load_ckpt(cfg, "pae", digest, args.force)
    db = _load_db(cfg)
    timings: list | None = [] if args.timing else None
    report = refine_report(dataset, apr, pae, db, _refine_config(cfg), digest,
                           timings_ms=timings)
    _emit(cfg, report)
    if timings:
        _write_timing(cfg, "refine", timings)
    return 0


def cmd_refine_random_guess(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    _check_run_config(cfg, digest, args.force)
    dataset = _load_run_dataset(cfg)
    pae = _load_ckpt(cfg, "pae", digest, args.force)
    db = _load_db(cfg)
    report = random_guess_report(dataset, pae, db, _refine_config(cfg),
                                 sigma=cfg.sigma_frac * cfg.extent,
                                 trials=cfg.trials, seed=cfg.seed,
                                 digest=digest,
                                 orient_jitter_deg=cfg.orient_jitter_deg)
    _emit(cfg, report)
    return 0


def cmd_virtual_rpr(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    _check_run_config(cfg, digest, args.force)
    dataset = _load_run_dataset(cfg)
    apr = _load_ckpt(cfg, "apr", digest, args.force)
    pae = _load_ckpt(cfg, "pae", digest, args.force)
    decoder = _load_ckpt(cfg, "decoder", digest, args.force)
    rpr = _load_ckpt(cfg, "rpr", digest, args.force)
    db = _load_db(cfg)
    timings: list | None = [] if args.timing else None
    report = virtual_rpr_report(dataset, apr, pae, decoder, rpr, db, digest,
                                timings_ms=timings)
    _emit(cfg, report)
    if timings:
        _write_timing(cfg, "virtual-rpr", timings)
    return 0


def cmd_ablate_fourier(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    _check_run_config(cfg, digest, args.force)
    dataset = _load_run_dataset(cfg)
    apr = _load_ckpt(cfg, "apr", digest, args.force)
    for levels in ABLATION_LEVELS:
        sweep_cfg = dataclasses.replace(cfg, levels=levels)
        sweep_digest = config_digest(sweep_cfg)
        train_cfg = PaeTrainConfig(levels=levels, epochs=cfg.pae_epochs,
                                   lr=cfg.pae_lr, lr_decay=cfg.pae_lr_decay,
                                   batch_size=cfg.batch_size, seed=cfg.seed,
                                   latent_weight=cfg.pae_latent_weight)
        report = ablate_fourier_report(dataset, apr, levels, train_cfg,
                                       sweep_digest)
        _emit(cfg, report, stem=f"ablate-L{levels}")
    return 0


def cmd_orientation_affine(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    _check_run_config(cfg, digest, args.force)
    dataset = _load_run_dataset(cfg)
    apr = _load_ckpt(cfg, "apr", digest, args.force)
    pae = _load_ckpt(cfg, "pae", digest, args.force)
    db = _load_db(cfg)
    _emit(cfg, orientation_affine_report(dataset, apr, pae, db,
                                         _refine_config(cfg), digest))
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    digest = config_digest(cfg)
    reports_dir = cfg.run_dir() / "reports"
    paths = sorted(reports_dir.glob("*.json")) if reports_dir.exists() else []
    paths = [p for p in paths if not p.name.startswith("timing.")]
    # The ablation sweep legitimately varies the feature depth, so its
    # per-level digests count as belonging to the current config.
    allowed = {digest} | {
        config_digest(dataclasses.replace(cfg, levels=lv))
        for lv in ABLATION_LEVELS}
    collected = {}
    foreign = set()
    for path in paths:
        report = read_report(path)
        collected[path.stem] = report.as_dict()
        if report.config_digest not in allowed:
            foreign.add(report.config_digest[:12])
    if foreign and not args.force:
        raise UsageError(
            f"reports under {reports_dir} carry config digests "
            f"{sorted(foreign)} not derived from the current config "
            f"{digest[:12]}; regenerate or pass --force")
    summary = {"kind": "summary", "config_digest": digest,
               "reports": collected}
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    (run / "report.json").write_text(canonical_dumps(summary) + "\n")
    text = [f"run {cfg.name}  (config {digest[:12]})\n"]
    for stem in sorted(collected):
        entry = collected[stem]
        text.append(f"\n[{stem}]\n")
        text.append(render_report(Report(entry["kind"],
                                         entry["config_digest"],
                                         entry["rows"], entry["timing"])))
    (run / "report.txt").write_text("".join(text))
    sys.stdout.write("".join(text))
    sys.stdout.write(f"wrote {run / 'report.json'}\n")
    return 0


_COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "train-apr": cmd_train_apr,
    "train-pae": cmd_train_pae,
    "train-decoder": cmd_train_decoder,
    "train-rpr": cmd_train_rpr,
    "eval": cmd_eval,
    "refine": cmd_refine,
    "refine-random-guess": cmd_refine_random_guess,
    "virtual-rpr": cmd_virtual_rpr,
    "ablate-fourier": cmd_ablate_fourier,
    "orientation-affine": cmd_orientation_affine,
    "report": cmd_report,
}
_TIMED = {"refine", "virtual-rpr"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poselab",
                     description="Pose auto-encoder experiments on a "
                                 "synthetic scene.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--run", default=None,
                       help="run name under the output root")
        p.add_argument("--out-root", default="runs")
        p.add_argument("--config", default=None,
                       help="JSON config file (otherwise the run's stored "
                            "config.json, otherwise defaults)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field")
        p.add_argument("--force", action="store_true",
                       help="proceed on config digest mismatch and adopt "
                            "the current config")
        if name in _TIMED:
            p.add_argument("--timing", action="store_true",
                           help="write per-query wall-clock sidecar")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
        return _COMMANDS[args.command](cfg, args)
    except UsageError as err:
        sys.stderr.write(f"error: {err}\n")
        return 1
    except (ValueError, FileNotFoundError) as err:
        sys.stderr.write(f"error: {err}\n")
        return 1
    except (TrainingDiverged, RefineDiverged, NonFiniteError) as err:
        sys.stderr.write(f"numerical abort: {err}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
