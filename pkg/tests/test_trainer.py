import csv
import math
import os

import numpy as np
import pytest

from u2u.errors import ConfigError, CorruptCheckpoint, VersionUnsupported
from u2u.seqprep import ManifestRecord, ParallelManifest
from u2u.trainer import (ABLATION_COLUMNS, AdamState, Checkpoint, TrainConfig, adam_step, dev_loss,
                         load_checkpoint, read_grid, run_ablation, save_checkpoint, train)
from u2u.transformer import ModelConfig, forward, init_params

CFG = ModelConfig(d_model=16, heads=1, enc_layers=1, dec_layers=1, ffn_dim=32, dropout=0.1, vocab=9, max_len=30)


def reverse_task(n, seed=0, split=None):
    rng = np.random.default_rng(seed)
    recs = [ManifestRecord(f"s{seed}_{i}", "x", "y") for i in range(n)]
    m = ParallelManifest(recs, split=split)
    for r in recs:
        u = rng.integers(0, 6, rng.integers(2, 8))
        m.set_units(r.id, "source", u)
        m.set_units(r.id, "target", u[::-1])
    return m


def test_adam_unrolled_oracle():
    cfg = TrainConfig(lr=1e-4)
    p = {"w": np.array([0.5])}
    st = AdamState.zeros_like(p)
    m = v = 0.0
    theta = 0.5
    for t in range(1, 4):
        adam_step(p, {"w": np.array([1.0])}, st, cfg)
        m = 0.9 * m + 0.1 * 1.0
        v = 0.999 * v + 0.001 * 1.0
        theta -= 1e-4 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert st.t == 3
    assert abs(p["w"][0] - theta) < 1e-12


def test_adam_first_step_and_zero_grad(rng):
    p = {"w": rng.normal(size=5)}
    before = p["w"].copy()
    g = rng.normal(size=5)
    adam_step(p, {"w": g}, AdamState.zeros_like(p), TrainConfig())
    np.testing.assert_allclose(np.abs(p["w"] - before), 1e-4, rtol=1e-6)
    q = {"w": before.copy()}
    st = AdamState.zeros_like(q)
    for _ in range(5):
        adam_step(q, {"w": np.zeros(5)}, st, TrainConfig())
    np.testing.assert_array_equal(q["w"], before)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(beta2=1.0)


def test_step_bookkeeping():
    rep = train(CFG, TrainConfig(epochs=1, batch_size=10), reverse_task(25), reverse_task(5, 1))
    assert rep.steps == 3 and len(rep.rows) == 1
    assert abs(rep.rows[0]["train_loss"] - np.mean(rep.batch_losses)) < 1e-12


def test_determinism_and_files(tmp_path):
    tr, dv = reverse_task(40), reverse_task(10, 1)
    tc = TrainConfig(epochs=2, batch_size=8, seed=3)
    a = train(CFG, tc, tr, dv, tmp_path / "a")
    b = train(CFG, tc, tr, dv, tmp_path / "b")
    assert [r["train_loss"] for r in a.rows] == [r["train_loss"] for r in b.rows]
    assert [r["val_loss"] for r in a.rows] == [r["val_loss"] for r in b.rows]
    with open(tmp_path / "a" / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "seconds"] and len(rows) == 3
    assert os.path.exists(tmp_path / "a" / "last.ckpt") and os.path.exists(tmp_path / "a" / "best.ckpt")


def test_checkpoint_round_trip_bitwise(tmp_path):
    tr, dv = reverse_task(20), reverse_task(5, 1)
    rep = train(CFG, TrainConfig(epochs=1, batch_size=10), tr, dv, tmp_path)
    ck = load_checkpoint(rep.last_checkpoint)
    assert ck.epoch == 1 and ck.opt.t == 2 and ck.model_cfg == CFG
    from u2u.seqprep import make_batches
    b = make_batches(dv, 5, shuffle=False, seq_len=30)[0]
    before, _ = forward(rep.params, CFG, b, keep_cache=False)
    after, _ = forward(ck.params, CFG, b, keep_cache=False)
    assert before.tobytes() == after.tobytes()


def test_resume_equals_uninterrupted(tmp_path):
    tr, dv = reverse_task(30), reverse_task(6, 1)
    tc = TrainConfig(epochs=4, batch_size=7, seed=1)
    full = train(CFG, tc, tr, dv, tmp_path / "full")
    train(CFG, tc, tr, dv, tmp_path / "half", stop_after=2)
    resumed = train(CFG, tc, tr, dv, tmp_path / "half", resume=str(tmp_path / "half" / "last.ckpt"))
    assert resumed.steps == full.steps
    for k in full.params:
        assert full.params[k].tobytes() == resumed.params[k].tobytes()
    assert [r["val_loss"] for r in full.rows] == [r["val_loss"] for r in resumed.rows]


def test_corrupt_and_version(tmp_path):
    p = tmp_path / "c.ckpt"
    params = init_params(CFG, 0)
    save_checkpoint(Checkpoint(CFG, TrainConfig(), params, AdamState.zeros_like(params)), p)
    blob = p.read_bytes()
    p.write_bytes(blob[:-100])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(p)
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 1
    p.write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(p)
    p.write_bytes(blob[:4] + (7).to_bytes(4, "little") + blob[8:])
    with pytest.raises(VersionUnsupported):
        load_checkpoint(p)
    with pytest.raises(FileNotFoundError, match="nope.ckpt"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_dev_loss_decreases():
    tr, dv = reverse_task(200), reverse_task(40, 1)
    cfg = ModelConfig(**{**CFG.to_dict(), "dropout": 0.0})
    rep = train(cfg, TrainConfig(epochs=5, batch_size=25, lr=1e-3), tr, dv)
    assert rep.rows[-1]["val_loss"] < rep.rows[0]["val_loss"]
    assert abs(dev_loss(rep.params, cfg, dv) - rep.rows[-1]["val_loss"]) < 1e-12


def test_grid_file_shipped():
    from u2u.cli import default_grid_path
    rows = read_grid(default_grid_path())
    assert [r["expt_no"] for r in rows] == list(range(1, 8))
    assert {r["sequence_length"] for r in rows} == {300, 200}
    assert {r["heads"] for r in rows} == {1, 4}
    assert {r["enc_dec_layers"] for r in rows} == {3, 6}
    assert {r["feedforward_dim"] for r in rows} == {2048, 1024}
    assert {r["learning_rate"] for r in rows} == {1e-4, 1e-5, 1e-3}
    assert {r["epochs"] for r in rows} == {80, 100}
    assert not any("error" in r for r in rows)


def test_ablation_rows(tmp_path):
    grid = tmp_path / "g.csv"
    grid.write_text("expt_no,sequence_length,heads,enc_dec_layers,feedforward_dim,learning_rate,epochs\n"
                    "1,30,1,1,16,0.001,2\n"
                    "2,30,two,1,16,0.001,2\n"
                    "3,30,2,1,16,0.001,1\n")
    data = (reverse_task(20), reverse_task(5, 1), reverse_task(5, 2))
    out = tmp_path / "res.csv"
    rows = run_ablation(read_grid(grid), data, CFG, TrainConfig(batch_size=10), out, epoch_cap=1)
    with open(out) as f:
        table = list(csv.reader(f))
    assert tuple(table[0]) == ABLATION_COLUMNS
    assert [r[0] for r in table[1:]] == ["1", "2", "3"]
    assert table[2][7:] == ["", "", ""]  # the malformed row is recorded with empty metrics
    assert table[1][8] != "" and table[3][8] != ""
    assert "expt 2" in (tmp_path / "res.csv.errors.txt").read_text()
    assert len(rows) == 3
    empty = tmp_path / "empty.csv"
    run_ablation([], data, CFG, TrainConfig(), empty)
    assert empty.read_text().strip() == ",".join(ABLATION_COLUMNS)
