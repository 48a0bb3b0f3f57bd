"""Model forwarding, training loops, freezing, and checkpoint persistence."""
import numpy as np
import pytest

from poselab.autodiff import grad_check
from poselab.models import (
    AprModel, DecoderModel, PaeModel, RprModel, apr_forward, combine_latents,
    decode_image, load_checkpoint, model_from_checkpoint, pae_forward,
    rpr_forward, save_checkpoint,
)
from poselab.posemath import make_pose, pose_loss_node
from poselab.rng import SplitMix64
from poselab.scene import build_dataset, generate_scene
from poselab.training import (
    AprTrainConfig, DecoderTrainConfig, PaeTrainConfig, RprTrainConfig,
    TrainingDiverged, train_apr, train_decoder, train_pae, train_rpr,
)

RES = 16
SMALL_APR = dict(d=16, trunk_widths=(32, 32))


@pytest.fixture(scope="module")
def tiny_dataset():
    scene = generate_scene(0, 24, 10.0, focal=20.0, principal=(8.0, 8.0))
    return build_dataset([scene], 30, 10, RES, 0)


@pytest.fixture(scope="module")
def tiny_teacher(tiny_dataset):
    cfg = AprTrainConfig(epochs=3, seed=0, **SMALL_APR)
    return train_apr(tiny_dataset, cfg)


# -- forward contracts -------------------------------------------------------

def test_apr_forward_contract(tiny_dataset):
    model = AprModel.init(0, resolution=RES, **SMALL_APR)
    img = tiny_dataset.test[0].image
    latents, pose = apr_forward(model, img)
    assert latents.dim == 16
    assert abs(np.linalg.norm(pose.q) - 1.0) < 1e-12
    latents2, pose2 = apr_forward(model, img)
    np.testing.assert_array_equal(latents.z_x, latents2.z_x)
    np.testing.assert_array_equal(pose.x, pose2.x)


def test_apr_forward_rejects_resolution_mismatch():
    model = AprModel.init(0, resolution=RES, **SMALL_APR)
    with pytest.raises(ValueError, match="resolution"):
        apr_forward(model, np.zeros((32, 32, 3)))


def test_pae_forward_contract():
    model = PaeModel.init(0, d=16, widths=(16, 24, 32))
    pose = make_pose([1.0, 2.0, 3.0], [0.5, 0.5, 0.5, 0.5])
    z = pae_forward(model, pose)
    assert z.dim == 16
    z2 = pae_forward(model, pose)
    np.testing.assert_array_equal(z.z_x, z2.z_x)
    far = make_pose([21.0, 2.0, 3.0], [0.5, 0.5, 0.5, 0.5])
    zf = pae_forward(model, far)
    assert np.linalg.norm(z.z_x - zf.z_x) > 0.0


def test_pae_multi_scene_rejects_unknown_scene():
    model = PaeModel.init(0, d=8, scene_ids=(0, 1, 2), widths=(8, 8, 8))
    pose = make_pose([0, 0, 20.0], [1, 0, 0, 0])
    assert pae_forward(model, pose, 2).dim == 8
    with pytest.raises(ValueError, match="scene"):
        pae_forward(model, pose, 7)


def test_pae_scene_encoding_separates_scenes():
    model = PaeModel.init(0, d=8, scene_ids=(0, 1), widths=(8, 8, 8))
    pose = make_pose([0, 0, 20.0], [1, 0, 0, 0])
    a = pae_forward(model, pose, 0)
    b = pae_forward(model, pose, 1)
    assert np.linalg.norm(a.z_x - b.z_x) > 0.0


def test_combine_latents_modes():
    zx, zq = np.array([1.0, 2.0]), np.array([10.0, 20.0])
    np.testing.assert_array_equal(combine_latents("sum", zx, zq), [11.0, 22.0])
    np.testing.assert_array_equal(combine_latents("concat", zx, zq),
                                  [1.0, 2.0, 10.0, 20.0])
    with pytest.raises(ValueError):
        combine_latents("mean", zx, zq)


def test_decode_image_contract():
    pae = PaeModel.init(0, d=16, widths=(16, 24, 32))
    dec = DecoderModel.init(1, d=16, resolution=RES, widths=(32, 48, 64))
    pose = make_pose([0, 0, 20.0], [1, 0, 0, 0])
    img = decode_image(dec, pae, pose)
    assert img.shape == (RES, RES, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0
    np.testing.assert_array_equal(img, decode_image(dec, pae, pose))


def test_rpr_forward_shape_and_sharing(tiny_dataset):
    model = RprModel.init(0, d=16, resolution=RES, trunk_widths=(32, 32),
                          fuse_width=32)
    a = tiny_dataset.train[0].image
    b = tiny_dataset.train[1].image
    assert rpr_forward(model, a, b).shape == (3,)
    # Siamese trunk shares weights: identical inputs give identical features,
    # so a symmetric pair set has swap-negate-invariant loss.
    xs = np.stack([tiny_dataset.train[i].pose.x for i in range(4)])
    imgs = [tiny_dataset.train[i].image for i in range(4)]
    pairs = [(0, 1), (2, 3)]
    sym = pairs + [(j, i) for i, j in pairs]
    direct = sum(np.linalg.norm(rpr_forward(model, imgs[i], imgs[j])
                                - (xs[i] - xs[j])) for i, j in sym)
    swapped = sum(np.linalg.norm(-rpr_forward(model, imgs[j], imgs[i])
                                 - (xs[i] - xs[j])) for i, j in sym)
    assert direct == pytest.approx(swapped, abs=1e-12)


# -- gradient checks at init ---------------------------------------------------

def _apr_loss_builder(model, images, xs, qs):
    names = list(model.params.keys())

    def build(g, pids):
        pmap = dict(zip(names, pids))
        out = model.forward_nodes(g, pmap, g.constant(images))
        lx = g.l2norm(g.sub(out["x"], g.constant(xs)))
        lq = g.l2norm(g.sub(g.constant(qs), out["q"]))
        return pose_loss_node(g, lx, lq, pmap["loss.s_x"], pmap["loss.s_q"])

    return build, [model.params[n] for n in names], names


def test_grad_check_apr_at_init():
    rng = SplitMix64(1)
    model = AprModel.init(0, d=4, resolution=RES, trunk_widths=(6, 6))
    images = np.array(rng.uniforms(2 * 3 * RES * RES)).reshape(2, -1)
    xs = np.array(rng.normals(6)).reshape(2, 3)
    qs = np.array(rng.normals(8)).reshape(2, 4)
    build, values, names = _apr_loss_builder(model, images, xs, qs)
    res = grad_check(build, values, names=names)
    assert res.max_rel_error < 1e-4, res.per_param


def test_grad_check_pae_at_init():
    rng = SplitMix64(2)
    model = PaeModel.init(0, d=4, widths=(6, 6, 6))
    in_x, in_q = model.input_lengths()
    ex = np.array(rng.normals(2 * in_x)).reshape(2, -1)
    eq = np.array(rng.normals(2 * in_q)).reshape(2, -1)
    tx = np.array(rng.normals(8)).reshape(2, 4)
    tq = np.array(rng.normals(8)).reshape(2, 4)
    names = list(model.params.keys())

    def build(g, pids):
        out = model.forward_nodes(g, dict(zip(names, pids)),
                                  g.constant(ex), g.constant(eq))
        return g.add(g.l2norm(g.sub(out["z_x"], g.constant(tx))),
                     g.l2norm(g.sub(out["z_q"], g.constant(tq))))

    res = grad_check(build, [model.params[n] for n in names], names=names)
    assert res.max_rel_error < 1e-4, res.per_param


def test_grad_check_decoder_at_init():
    rng = SplitMix64(3)
    model = DecoderModel.init(0, d=4, resolution=RES, widths=(6, 8, 10))
    codes = np.array(rng.normals(2 * 4)).reshape(2, 4)
    target = np.array(rng.uniforms(2 * 3 * RES * RES)).reshape(2, -1)
    names = list(model.params.keys())

    def build(g, pids):
        out = model.forward_nodes(g, dict(zip(names, pids)), g.constant(codes))
        return g.l1loss(out, g.constant(target))

    res = grad_check(build, [model.params[n] for n in names], names=names)
    assert res.max_rel_error < 1e-4, res.per_param


def test_grad_check_rpr_at_init():
    rng = SplitMix64(4)
    model = RprModel.init(0, d=4, resolution=RES, trunk_widths=(6, 6),
                          fuse_width=6)
    a = np.array(rng.uniforms(2 * 3 * RES * RES)).reshape(2, -1)
    b = np.array(rng.uniforms(2 * 3 * RES * RES)).reshape(2, -1)
    t = np.array(rng.normals(6)).reshape(2, 3)
    names = list(model.params.keys())

    def build(g, pids):
        out = model.forward_nodes(g, dict(zip(names, pids)),
                                  g.constant(a), g.constant(b))
        return g.l2norm(g.sub(out, g.constant(t)))

    res = grad_check(build, [model.params[n] for n in names], names=names)
    assert res.max_rel_error < 1e-4, res.per_param


# -- training loops ---------------------------------------------------------------

def test_train_apr_zero_epochs_equals_init(tiny_dataset):
    cfg = AprTrainConfig(epochs=0, seed=3, **SMALL_APR)
    ckpt = train_apr(tiny_dataset, cfg)
    fresh = AprModel.init(3, 16, RES, (32, 32), cfg.s_x_init, cfg.s_q_init)
    assert ckpt.epoch == 0
    for name, arr in fresh.params.items():
        np.testing.assert_array_equal(ckpt.params[name], arr)


def test_train_apr_loss_decreases(tiny_dataset, tmp_path):
    log = tmp_path / "log.jsonl"
    cfg = AprTrainConfig(epochs=8, seed=0, **SMALL_APR)
    train_apr(tiny_dataset, cfg, log_path=log)
    lines = [eval(l) for l in log.read_text().splitlines()]
    assert len(lines) == 8
    assert lines[-1]["loss"] < lines[0]["loss"]


def test_train_apr_deterministic(tiny_dataset):
    cfg = AprTrainConfig(epochs=2, seed=1, **SMALL_APR)
    a = train_apr(tiny_dataset, cfg)
    b = train_apr(tiny_dataset, cfg)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_apr_divergence_reports_epoch(tiny_dataset):
    cfg = AprTrainConfig(epochs=2, lr=1e100, seed=0, **SMALL_APR)
    with pytest.raises(TrainingDiverged, match="epoch"):
        train_apr(tiny_dataset, cfg)


def test_train_pae_freezes_teacher(tiny_dataset, tiny_teacher):
    before = {n: a.tobytes() for n, a in tiny_teacher.params.items()}
    cfg = PaeTrainConfig(epochs=2, seed=0, widths=(16, 24, 32))
    student = train_pae(tiny_teacher, tiny_dataset, cfg)
    assert student.kind == "pae"
    for name, blob in before.items():
        assert tiny_teacher.params[name].tobytes() == blob


def test_train_pae_latent_term_decreases(tiny_dataset, tiny_teacher, tmp_path):
    log = tmp_path / "pae.jsonl"
    cfg = PaeTrainConfig(epochs=8, seed=0, widths=(16, 24, 32))
    train_pae(tiny_teacher, tiny_dataset, cfg, log_path=log)
    lines = [eval(l) for l in log.read_text().splitlines()]
    assert lines[-1]["latent"] < lines[0]["latent"]


def test_train_pae_decodes_finite_poses(tiny_dataset, tiny_teacher):
    cfg = PaeTrainConfig(epochs=1, seed=0, widths=(16, 24, 32))
    student_ckpt = train_pae(tiny_teacher, tiny_dataset, cfg)
    student = model_from_checkpoint(student_ckpt)
    teacher = model_from_checkpoint(tiny_teacher)
    for s in tiny_dataset.test:
        z = pae_forward(student, s.pose, s.scene_id)
        x = z.z_x @ teacher.params["head_x.w"] + teacher.params["head_x.b"][0]
        q = z.z_q @ teacher.params["head_q.w"] + teacher.params["head_q.b"][0]
        assert np.isfinite(x).all() and np.isfinite(q).all()


def test_train_decoder_records_untrained_baseline(tiny_dataset, tiny_teacher,
                                                  tmp_path):
    pae_ckpt = train_pae(tiny_teacher, tiny_dataset,
                         PaeTrainConfig(epochs=1, seed=0, widths=(16, 24, 32)))
    log = tmp_path / "dec.jsonl"
    cfg = DecoderTrainConfig(epochs=0, seed=0, widths=(32, 48, 64))
    ckpt = train_decoder(pae_ckpt, tiny_dataset, cfg, log_path=log)
    lines = [eval(l) for l in log.read_text().splitlines()]
    assert len(lines) == 1 and lines[0]["epoch"] == 0
    assert np.isfinite(lines[0]["heldout_l1"])
    assert ckpt.kind == "decoder"


def test_train_rpr_rejects_tiny_dataset(tiny_dataset):
    lone = type(tiny_dataset)(tiny_dataset.train[:1], tiny_dataset.test[:1],
                              tiny_dataset.scenes, RES, 1, 1, 0)
    with pytest.raises(ValueError, match="2"):
        train_rpr(lone, RprTrainConfig(epochs=1, d=16, trunk_widths=(32, 32),
                                       fuse_width=32))


def test_train_rpr_runs_and_is_deterministic(tiny_dataset):
    cfg = RprTrainConfig(epochs=2, d=16, seed=5, trunk_widths=(32, 32),
                         fuse_width=32)
    a = train_rpr(tiny_dataset, cfg)
    b = train_rpr(tiny_dataset, cfg)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()


# -- checkpoints --------------------------------------------------------------------

def test_checkpoint_round_trip_byte_identical(tiny_teacher, tmp_path):
    p1 = tmp_path / "apr.ckpt"
    p2 = tmp_path / "apr2.ckpt"
    save_checkpoint(tiny_teacher, p1)
    back = load_checkpoint(p1)
    save_checkpoint(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for name in tiny_teacher.params:
        np.testing.assert_array_equal(back.params[name],
                                      tiny_teacher.params[name])
    assert back.optim["step"] == tiny_teacher.optim["step"]


def test_checkpoint_rebuilds_identical_model(tiny_dataset, tiny_teacher,
                                             tmp_path):
    path = tmp_path / "apr.ckpt"
    save_checkpoint(tiny_teacher, path)
    model = model_from_checkpoint(load_checkpoint(path))
    img = tiny_dataset.test[0].image
    direct = model_from_checkpoint(tiny_teacher)
    a_lat, a_pose = apr_forward(model, img)
    b_lat, b_pose = apr_forward(direct, img)
    np.testing.assert_array_equal(a_pose.x, b_pose.x)
    np.testing.assert_array_equal(a_lat.z_q, b_lat.z_q)


def test_load_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(bad)
