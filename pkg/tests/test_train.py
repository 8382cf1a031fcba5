"""Optimizer behavior, schedules, determinism, resume, freezing, transfer."""

import csv
import math
from pathlib import Path

import numpy as np
import pytest

import patch2image.train as train_mod
from patch2image.checkpoint import save_checkpoint
from patch2image.convert import attach_top, convolutionalize_head
from patch2image.datasets import ImageSet, PatchSet
from patch2image.errors import CheckpointError, ConfigError, UsageError
from patch2image.graph import build_patch_net
from patch2image.kernels import Parameter
from patch2image.train import (
    Adam,
    IMAGE_SCHEDULE,
    PATCH_SCHEDULE,
    Stage,
    TrainRun,
    image_auc,
    patch_accuracy,
    scale_schedule,
    train_patch_classifier,
    train_whole_image,
)
from patch2image.transfer import transfer_curve


def _param(name, value):
    return Parameter(np.array(value, dtype=np.float64), name)


# -- optimizer ---------------------------------------------------------------------


def test_adam_first_step_of_unit_gradient_is_exact():
    # start at zero so the subtraction cannot round the update away
    lr = 1e-3
    p = _param("w", [0.0, 0.0, 0.0])
    opt = Adam([p], lr=lr)
    p.grad = np.ones_like(p.value)
    opt.step()
    expected = lr / (1.0 + opt.eps)
    assert np.all(p.value == -expected)


def test_adam_first_step_never_exceeds_lr():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = _param("w", rng.normal(size=7))
        opt = Adam([p], lr=0.05)
        before = p.value.copy()
        p.grad = rng.normal(size=7) * rng.choice([1e-8, 1.0, 1e8])
        opt.step()
        # |g|/(|g|+eps) < 1, so one step moves at most lr (mod fp rounding)
        assert np.abs(p.value - before).max() <= 0.05 * (1 + 1e-12)


def test_adam_matches_textbook_recurrence():
    rng = np.random.default_rng(1)
    p = _param("w", rng.normal(size=5))
    theta = p.value.copy()
    opt = Adam([p], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 8):
        g = rng.normal(size=5)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        theta = theta - 0.01 * mh / (np.sqrt(vh) + 1e-8)
        np.testing.assert_allclose(p.value, theta, rtol=1e-12)


def test_adam_rejects_bad_setup():
    with pytest.raises(ConfigError):
        Adam([_param("w", [1.0])], lr=0.0)
    with pytest.raises(UsageError):
        Adam([_param("w", [1.0]), _param("w", [2.0])], lr=0.1)
    p = _param("w", [1.0])
    opt = Adam([p], lr=0.1)
    with pytest.raises(UsageError, match="without a gradient"):
        opt.step()


def test_adam_state_round_trip_continues_bitwise():
    rng = np.random.default_rng(2)
    grads = [rng.normal(size=(3, 4)) for _ in range(6)]

    def fresh():
        q = _param("w", np.zeros((3, 4)))
        return q, Adam([q], lr=0.02)

    p1, o1 = fresh()
    for g in grads[:3]:
        p1.grad = g
        o1.step()
    blob = o1.state_bytes()

    p2, o2 = fresh()
    p2.value[...] = p1.value
    o2.load_state_bytes(blob)
    assert o2.t == 3
    for g in grads[3:]:
        p1.grad = g
        o1.step()
        p2.grad = g
        o2.step()
    np.testing.assert_array_equal(p1.value, p2.value)


def test_adam_state_mismatch_is_an_error():
    p = _param("w", np.zeros(3))
    opt = Adam([p], lr=0.02)
    p.grad = np.ones(3)
    opt.step()
    blob = opt.state_bytes()
    other = Adam([_param("q", np.zeros(3))], lr=0.02)
    with pytest.raises(CheckpointError, match="moments"):
        other.load_state_bytes(blob)
    shaped = Adam([_param("w", np.zeros(4))], lr=0.02)
    with pytest.raises(CheckpointError, match="shape"):
        shaped.load_state_bytes(blob)


# -- schedules ---------------------------------------------------------------------


def test_default_schedules():
    assert [s.epochs for s in PATCH_SCHEDULE] == [3, 10, 37]
    assert [s.lr for s in PATCH_SCHEDULE] == [1e-3, 1e-4, 1e-5]
    assert PATCH_SCHEDULE[0].groups == ("head",)
    assert PATCH_SCHEDULE[2].groups == "all"
    assert [s.epochs for s in IMAGE_SCHEDULE] == [10, 20]
    assert IMAGE_SCHEDULE[0].groups == ("image-top",)


def test_scale_schedule_keeps_lrs_and_floors_epochs():
    tiny = scale_schedule(PATCH_SCHEDULE, 0.02)
    assert [s.epochs for s in tiny] == [1, 1, 1]
    assert [s.lr for s in tiny] == [s.lr for s in PATCH_SCHEDULE]
    assert [s.groups for s in tiny] == [s.groups for s in PATCH_SCHEDULE]
    half = scale_schedule(PATCH_SCHEDULE, 0.5)
    assert [s.epochs for s in half] == [math.ceil(e / 2) for e in (3, 10, 37)]
    with pytest.raises(ConfigError):
        scale_schedule(PATCH_SCHEDULE, 0.0)


def test_trainrun_csv_and_last_val(tmp_path):
    run = TrainRun()
    run.log(stage=0, epoch_in_stage=0, global_epoch=0, lr=1e-3, groups="head",
            mean_loss=1.5, val_metric=0.4, seconds=2.0)
    run.log(stage=1, epoch_in_stage=0, global_epoch=1, lr=1e-4, groups="all",
            mean_loss=1.25, val_metric=0.5, seconds=2.5)
    assert run.last_val() == 0.5
    run.to_csv(tmp_path / "log.csv")
    with (tmp_path / "log.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["val_metric"] for r in rows] == ["0.4", "0.5"]
    assert [r["groups"] for r in rows] == ["head", "all"]
    with pytest.raises(UsageError):
        TrainRun().last_val()


# -- end-to-end patch training ------------------------------------------------------


def _toy_patches(n, seed, gain=0.1):
    """Class k patches carry a mean offset of k*gain; learnable but tiny."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    x = rng.normal(size=(n, 1, 64, 64)).astype(np.float32) * 0.1
    x += (y * gain)[:, None, None, None].astype(np.float32)
    return PatchSet(x=x, y=y.astype(np.int64),
                    image_ids=np.array([f"img{i}" for i in range(n)]),
                    offsets=np.zeros((n, 2), dtype=np.int64))


def _tiny_net(seed=0):
    return build_patch_net("mini-vgg", stages="4x1,6x1", stem_width=4,
                           patch_size=64, rng=np.random.default_rng(seed))


TOY_SCHEDULE = (Stage(1e-3, ("head",), 1), Stage(1e-4, "all", 2))


def test_patch_training_is_deterministic():
    tr, va = _toy_patches(20, 0), _toy_patches(8, 1)
    runs = []
    nets = []
    for _ in range(2):
        net = _tiny_net(7)
        run = train_patch_classifier(net, tr, va, pixel_mean=0.1,
                                     schedule=TOY_SCHEDULE, seed=3, batch_size=5)
        runs.append(run)
        nets.append(net)
    for pa, pb in zip(nets[0].all_params(), nets[1].all_params()):
        np.testing.assert_array_equal(pa.value, pb.value, err_msg=pa.name)
    cols = TrainRun.columns
    for ra, rb in zip(runs[0].rows, runs[1].rows):
        for c, a, b in zip(cols, ra, rb):
            if c != "seconds":
                assert a == b, c


def test_patch_training_logs_every_epoch():
    tr, va = _toy_patches(15, 0), _toy_patches(6, 1)
    net = _tiny_net(7)
    run = train_patch_classifier(net, tr, va, pixel_mean=0.1,
                                 schedule=TOY_SCHEDULE, seed=3, batch_size=5)
    assert len(run.rows) == 3
    stages = [r[0] for r in run.rows]
    geps = [r[2] for r in run.rows]
    assert stages == [0, 1, 1] and geps == [0, 1, 2]
    assert all(np.isfinite(r[5]) for r in run.rows)
    assert all(0.0 <= r[6] <= 1.0 for r in run.rows)


def test_best_pointer_is_max_val_with_earliest_tie():
    run = TrainRun()
    metrics = [0.2, 0.7, 0.5, 0.7]
    for i, m in enumerate(metrics):
        run.log(stage=0, epoch_in_stage=i, global_epoch=i, lr=1e-3,
                groups="head", mean_loss=1.0, val_metric=m, seconds=0.0)
    assert run.best_index() == 1
    assert run.best_epoch() == 1
    assert run.best_val() == 0.7


def test_best_checkpoint_file_holds_best_epoch_params(tmp_path, monkeypatch):
    from patch2image.checkpoint import load_checkpoint, restore_into
    from patch2image.train import best_checkpoint_path

    tr, va = _toy_patches(20, 0, gain=0.2), _toy_patches(8, 1, gain=0.2)
    snaps = []
    real_save = train_mod.save_checkpoint

    def keeper(path, graph, **kwargs):
        real_save(path, graph, **kwargs)
        if Path(path).name == "ck.bin":
            snaps.append({p.name: p.value.copy() for p in graph.all_params()})

    monkeypatch.setattr(train_mod, "save_checkpoint", keeper)
    net = _tiny_net(7)
    run = train_patch_classifier(net, tr, va, pixel_mean=0.2,
                                 schedule=TOY_SCHEDULE, seed=3, batch_size=5,
                                 checkpoint_path=tmp_path / "ck.bin")
    monkeypatch.undo()

    best_file = best_checkpoint_path(tmp_path / "ck.bin")
    assert best_file.name == "ck.best.bin"
    ckpt = load_checkpoint(best_file)
    assert ckpt.meta["val_metric"] == run.best_val()
    probe = _tiny_net(9)
    restore_into(probe, ckpt, strict=True)
    want = snaps[run.best_index()]
    for p in probe.all_params():
        np.testing.assert_array_equal(p.value, want[p.name], err_msg=p.name)


def test_stage_one_touches_only_head_parameters():
    tr, va = _toy_patches(15, 0), _toy_patches(6, 1)
    net = _tiny_net(7)
    before = {p.name: p.value.copy() for p in net.all_params()}
    bn_before = {l.name: (l.state.running_mean.copy(), l.state.running_var.copy())
                 for l in net.layers if hasattr(l, "state")}
    train_patch_classifier(net, tr, va, pixel_mean=0.1,
                           schedule=(Stage(1e-3, ("head",), 1),), seed=3,
                           batch_size=5)
    by_group = {}
    for layer in net.layers:
        for p in layer.params():
            by_group.setdefault(layer.group, []).append(p)
    assert all(not np.array_equal(p.value, before[p.name])
               for p in by_group["head"])
    for group in ("bottom", "top"):
        for p in by_group[group]:
            np.testing.assert_array_equal(p.value, before[p.name], err_msg=p.name)
    # frozen batch norm stays in inference mode: no running-stat drift
    for layer in net.layers:
        if hasattr(layer, "state"):
            np.testing.assert_array_equal(layer.state.running_mean,
                                          bn_before[layer.name][0], err_msg=layer.name)
            np.testing.assert_array_equal(layer.state.running_var,
                                          bn_before[layer.name][1], err_msg=layer.name)


def test_unfrozen_stage_updates_running_stats():
    tr, va = _toy_patches(15, 0), _toy_patches(6, 1)
    net = _tiny_net(7)
    bn = [l for l in net.layers if hasattr(l, "state")][0]
    rm = bn.state.running_mean.copy()
    train_patch_classifier(net, tr, va, pixel_mean=0.1,
                           schedule=(Stage(1e-4, "all", 1),), seed=3, batch_size=5)
    assert not np.array_equal(bn.state.running_mean, rm)


def test_resume_reproduces_straight_run(tmp_path, monkeypatch):
    tr, va = _toy_patches(20, 0), _toy_patches(8, 1)
    kw = dict(pixel_mean=0.1, schedule=TOY_SCHEDULE, seed=3, batch_size=5)

    straight = _tiny_net(7)
    run_a = train_patch_classifier(straight, tr, va, **kw)

    # archive every per-epoch checkpoint that the training loop writes
    archives = []
    real_save = train_mod.save_checkpoint

    def keeper(path, graph, **kwargs):
        real_save(path, graph, **kwargs)
        if Path(path).name != "ck.bin":  # skip the best-epoch sibling file
            return
        snap = tmp_path / f"epoch{len(archives)}.ckpt"
        snap.write_bytes(Path(path).read_bytes())
        archives.append(snap)

    monkeypatch.setattr(train_mod, "save_checkpoint", keeper)
    net_b = _tiny_net(7)
    train_patch_classifier(net_b, tr, va, checkpoint_path=tmp_path / "ck.bin", **kw)
    monkeypatch.undo()
    assert len(archives) == 3

    # resume mid-stage (after global epoch 2 of 3) and from the stage boundary
    for cut in (1, 0):
        resumed = _tiny_net(99)  # init is irrelevant; restore overwrites it
        run_c = train_patch_classifier(resumed, tr, va, resume_from=archives[cut], **kw)
        for pa, pb in zip(straight.all_params(), resumed.all_params()):
            np.testing.assert_array_equal(pa.value, pb.value, err_msg=pa.name)
        # the resumed log holds exactly the remaining epochs
        assert [r[2] for r in run_c.rows] == [r[2] for r in run_a.rows][cut + 1:]
        for ra, rb in zip(run_a.rows[cut + 1:], run_c.rows):
            for c, a, b in zip(TrainRun.columns, ra, rb):
                if c != "seconds":
                    assert a == b, c


def test_resume_rejects_a_different_schedule(tmp_path):
    tr, va = _toy_patches(10, 0), _toy_patches(6, 1)
    net = _tiny_net(7)
    train_patch_classifier(net, tr, va, pixel_mean=0.1,
                           schedule=(Stage(1e-3, ("head",), 1),), seed=3,
                           batch_size=5, checkpoint_path=tmp_path / "ck.bin")
    with pytest.raises(CheckpointError, match="schedule"):
        train_patch_classifier(_tiny_net(7), tr, va, pixel_mean=0.1,
                               schedule=TOY_SCHEDULE, seed=3, batch_size=5,
                               resume_from=tmp_path / "ck.bin")


def test_training_reduces_loss_on_learnable_toy():
    tr, va = _toy_patches(30, 0, gain=0.2), _toy_patches(12, 1, gain=0.2)
    net = _tiny_net(7)
    run = train_patch_classifier(
        net, tr, va, pixel_mean=0.2, seed=3, batch_size=6, augment=False,
        schedule=(Stage(1e-3, ("head",), 2), Stage(1e-3, "all", 8)))
    losses = [r[5] for r in run.rows]
    assert losses[-1] < losses[0]
    assert patch_accuracy(net, tr, 0.2) > 0.5  # 3 classes, chance is 1/3


# -- whole-image training ------------------------------------------------------------


def _toy_images(n, seed, size=96):
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(np.int64)
    x = rng.normal(size=(n, 1, size, size)).astype(np.float32) * 0.1
    x += (y / 8.0)[:, None, None, None].astype(np.float32)
    pids = np.array([f"p{i // 2:03d}" for i in range(n)])
    ids = np.array([f"i{i:03d}" for i in range(n)])
    return ImageSet(x=x, y=y, ids=ids, patients=pids)


@pytest.fixture(scope="module")
def tiny_image_net():
    net = _tiny_net(5)
    conv = convolutionalize_head(net)
    return attach_top(conv, "allconv", top_spec="6x1",
                      rng=np.random.default_rng(6))


def test_whole_image_training_runs_and_is_deterministic(tiny_image_net):
    tr, va = _toy_images(8, 0), _toy_images(4, 1)
    results = []
    for _ in range(2):
        net = tiny_image_net.from_topology(tiny_image_net.topology())
        for p, q in zip(net.all_params(), tiny_image_net.all_params()):
            p.value[...] = q.value
        run = train_whole_image(net, tr, va, pixel_mean=0.05,
                                schedule=(Stage(1e-4, ("image-top",), 1),
                                          Stage(1e-5, "all", 1)),
                                seed=2, batch_size=2)
        results.append((net, run))
    na, nb = results[0][0], results[1][0]
    for pa, pb in zip(na.all_params(), nb.all_params()):
        np.testing.assert_array_equal(pa.value, pb.value, err_msg=pa.name)
    assert all(0.0 <= r[6] <= 1.0 for r in results[0][1].rows)


def test_whole_image_stage_one_freezes_backbone(tiny_image_net):
    tr, va = _toy_images(8, 0), _toy_images(4, 1)
    net = tiny_image_net.from_topology(tiny_image_net.topology())
    before = {p.name: p.value.copy() for p in net.all_params()}
    train_whole_image(net, tr, va, pixel_mean=0.05,
                      schedule=(Stage(1e-4, ("image-top",), 1),),
                      seed=2, batch_size=2)
    changed = {p.name for p in net.all_params()
               if not np.array_equal(p.value, before[p.name])}
    image_top = {p.name for l in net.layers if l.group == "image-top"
                 for p in l.params()}
    assert changed and changed <= image_top


# -- transfer curve -------------------------------------------------------------------


def test_transfer_curve_shape_and_nesting(tiny_image_net, tmp_path):
    ckpt = tmp_path / "source.ckpt"
    save_checkpoint(ckpt, tiny_image_net, meta={"task": "image"})
    tr, va = _toy_images(12, 3), _toy_images(6, 4)
    points, subsets = transfer_curve(
        ckpt, tr, va, fractions=(0.5, 1.0),
        schedule=(Stage(1e-4, ("image-top",), 1),),
        pixel_mean=0.05, seed=9, batch_size=2)
    assert [p.fraction for p in points] == [0.0, 0.5, 1.0]
    assert points[0].n_images == 0
    assert set(subsets[0.5]) <= set(subsets[1.0])
    assert sorted(subsets[1.0]) == sorted(set(tr.patients))
    assert points[2].n_images == len(tr)
    for p in points:
        assert 0.0 <= p.auc <= 1.0
    # the zero-shot row is pure evaluation of the stored network
    from patch2image.checkpoint import load_graph

    base, _ = load_graph(ckpt)
    assert points[0].auc == image_auc(base, va, 0.05, batch_size=2)
