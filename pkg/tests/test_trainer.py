import json

import numpy as np
import pytest

from embdistill.embed_store import EmbeddingSet, PairedDataset
from embdistill.errors import CheckpointError, DataError, UsageError
from embdistill.nn import DenseLayer, Mlp
from embdistill.trainer import (
    TrainConfig,
    distill,
    epoch_indices,
    export_student_embeddings,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from embdistill import bds


def linear_toy(n, seed=0, in_dim=8, out_dim=16):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, in_dim))
    A = rng.normal(size=(in_dim, out_dim))
    return PairedDataset(X, X @ A, [f"s{i}" for i in range(n)])


def small_config(**kw):
    base = dict(
        epochs=4, batch_size=32, student_hidden=[12], student_dim=6, head_hidden=24,
        k_clusters=4, seed=5,
    )
    base.update(kw)
    return TrainConfig(**base)


def state_bytes(state):
    params = {**state.student.parameters("s."), **state.head.parameters("h.")}
    parts = [p.tobytes() for p in params.values()]
    parts += [state.adam.m[k].tobytes() for k in sorted(state.adam.m)]
    parts += [state.adam.v[k].tobytes() for k in sorted(state.adam.v)]
    return b"".join(parts) + repr((state.adam.t, state.epoch, state.step)).encode()


def test_linear_toy_converges():
    data = linear_toy(4096)
    # the targets are an exact linear image of the inputs
    B, res, *_ = np.linalg.lstsq(data.inputs, data.targets, rcond=None)
    assert np.abs(data.inputs @ B - data.targets).max() < 1e-9
    cfg = TrainConfig(
        epochs=50, batch_size=64, student_hidden=[32], student_dim=16, head_hidden=256,
        k_clusters=8, loss_kind="cosine",
    )
    _, _, report = distill(data, cfg)
    assert len(report.epoch_losses) == 50
    assert report.final_loss < 0.01


@pytest.mark.parametrize("kind", ["mse", "l1", "cosine", "clap", "kl"])
def test_loss_decreases_for_every_kind(kind):
    data = linear_toy(1024, seed=1)
    cfg = small_config(epochs=10, loss_kind=kind, student_hidden=[32], student_dim=16, head_hidden=64)
    _, _, report = distill(data, cfg)
    assert report.epoch_losses[9] < report.epoch_losses[0]


def test_zero_epochs_returns_initial_params():
    data = linear_toy(64)
    cfg = small_config(epochs=0)
    student, head, report = distill(data, cfg)
    fresh = init_state(cfg, 8, 16)
    assert state_bytes(report.state) == state_bytes(fresh)
    assert report.epoch_losses == []


def test_one_step_moves_student_and_head():
    data = linear_toy(32)
    cfg = small_config(epochs=1, batch_size=32)
    before = init_state(cfg, 8, 16)
    student, head, _ = distill(data, cfg)
    assert any((a.W != b.W).any() for a, b in zip(student.layers, before.student.layers))
    assert any((a.W != b.W).any() for a, b in zip(head.layers, before.head.layers))


def test_partial_last_batch_kept():
    data = linear_toy(70)
    cfg = small_config(epochs=1, batch_size=32)
    _, _, report = distill(data, cfg)
    assert report.state.step == 3


def test_epoch_sample_size_clamped(caplog):
    data = linear_toy(40)
    cfg = small_config(epochs=1, epoch_sample_size=1000, batch_size=40)
    _, _, report = distill(data, cfg)
    assert report.state.step == 1
    assert "exceeds dataset size" in caplog.text


def test_subsampled_epoch():
    data = linear_toy(100)
    cfg = small_config(epochs=2, epoch_sample_size=50, batch_size=25)
    _, _, report = distill(data, cfg)
    assert report.state.step == 4


def test_dimension_checks():
    data = linear_toy(16)
    cfg = small_config()
    state = init_state(cfg, 5, 16)
    with pytest.raises(DataError):
        distill(data, cfg, resume=state)
    state = init_state(cfg, 8, 7)
    with pytest.raises(DataError):
        distill(data, cfg, resume=state)


def test_same_seed_bit_identical_checkpoints(tmp_path):
    data = linear_toy(96)
    cfg = small_config()
    for name in ("a", "b"):
        _, _, rep = distill(data, cfg)
        save_checkpoint(tmp_path / name, rep.state, cfg)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_different_seed_differs():
    data = linear_toy(96)
    _, _, a = distill(data, small_config(seed=1))
    _, _, b = distill(data, small_config(seed=2))
    assert state_bytes(a.state) != state_bytes(b.state)


def test_checkpoint_round_trip(tmp_path):
    data = linear_toy(64)
    cfg = small_config(epochs=2)
    _, _, rep = distill(data, cfg)
    save_checkpoint(tmp_path / "ck", rep.state, cfg)
    state, cfg2 = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg
    assert state_bytes(state) == state_bytes(rep.state)


@pytest.mark.parametrize("bds_enabled", [True, False])
def test_resume_equals_uninterrupted(tmp_path, bds_enabled):
    data = linear_toy(200, seed=3)
    cfg = small_config(epochs=4, bds_enabled=bds_enabled)
    _, _, full = distill(data, cfg)

    _, _, half = distill(data, cfg, until_epoch=2)
    assert half.state.epoch == 2
    save_checkpoint(tmp_path / "half", half.state, cfg)
    state, cfg_loaded = load_checkpoint(tmp_path / "half")
    _, _, rest = distill(data, cfg_loaded, resume=state)
    assert rest.state.epoch == 4
    assert state_bytes(rest.state) == state_bytes(full.state)
    assert half.epoch_losses + rest.epoch_losses == full.epoch_losses


def test_corrupted_manifest(tmp_path):
    data = linear_toy(32)
    cfg = small_config(epochs=1)
    _, _, rep = distill(data, cfg)
    ck = save_checkpoint(tmp_path / "ck", rep.state, cfg)
    manifest = ck / "manifest.json"
    good = manifest.read_text()

    manifest.write_text(good[: len(good) // 2])
    with pytest.raises(CheckpointError, match="JSON"):
        load_checkpoint(ck)

    m = json.loads(good)
    del m["adam"]
    manifest.write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="corrupted"):
        load_checkpoint(ck)

    m = json.loads(good)
    m["tensors"][0]["shape"] = [99, 99]
    manifest.write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(ck)

    m = json.loads(good)
    m["version"] = 42
    manifest.write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(ck)

    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nowhere")


def test_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(batch_size=0)
    with pytest.raises(UsageError):
        TrainConfig(loss_kind="hinge")
    with pytest.raises(UsageError):
        TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.base_lr) == (200, 64, 8e-4)
    assert (cfg.epoch_sample_size, cfg.k_clusters, cfg.head_hidden) == (100_000, 50, 1280)
    assert cfg.loss_kind == "cosine" and cfg.bds_enabled
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_export_identity_student():
    student = Mlp([DenseLayer(np.eye(3), np.zeros(3))])
    inputs = EmbeddingSet(["a", "b"], [[1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]])
    out = export_student_embeddings(student, inputs)
    assert out == inputs


def test_export_dim_and_batch_invariance():
    rng = np.random.default_rng(0)
    student = Mlp.init([5, 9, 4], rng)
    head = Mlp.init([4, 7, 3], rng)
    inputs = EmbeddingSet([f"i{k}" for k in range(150)], rng.normal(size=(150, 5)))
    a = export_student_embeddings(student, inputs, batch_size=1)
    b = export_student_embeddings(student, inputs, batch_size=64)
    assert a.dim == 4
    np.testing.assert_allclose(a.data, b.data, atol=1e-9)
    mapped = export_student_embeddings(student, inputs, head=head)
    assert mapped.dim == 3
    with pytest.raises(DataError):
        export_student_embeddings(student, EmbeddingSet(["x"], [[1.0]]))


def test_uniform_baseline_uses_same_stream():
    """With BDS off, epoch draws equal the plain uniform-weight sampler."""
    cfg = small_config(bds_enabled=False)
    w = bds.uniform_weights(50)
    for epoch in range(3):
        idx = epoch_indices(w, 50, cfg, epoch)
        assert (idx == bds.sample_epoch(np.ones(50), 50, [cfg.seed, 1, epoch])).all()


def test_log_csv(tmp_path):
    data = linear_toy(64)
    cfg = small_config(epochs=2, batch_size=32)
    distill(data, cfg, log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,lr,loss,wall_ms"
    assert len(lines) == 1 + 4
