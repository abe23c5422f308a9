from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import tiny_run_cfg
from mdiqa.aggregate import MDIQA
from mdiqa.data import make_synthetic_dataset, stack_samples
from mdiqa.train import (MAGIC, CheckpointError, StageError, checkpoint_bytes, group_hashes,
                         load_checkpoint, predictor, save_checkpoint, stage_two_trainable,
                         train_stage1, train_stage2)


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_run_cfg()
    data = stack_samples(make_synthetic_dataset(24, 32, seed=0, presence=1.0, max_severity=0.8),
                         cfg.model.registry())
    ck1 = train_stage1(data, cfg)
    ck2 = train_stage2(data, ck1, cfg)
    return cfg, data, ck1, ck2


def _equal_params(a, b):
    return list(a) == list(b) and all(torch.equal(a[k], b[k]) for k in a)


def test_stage1_steps_and_history(setup):
    cfg, data, ck1, _ = setup
    assert ck1.stage == "one"
    assert ck1.step == 2 * 3  # 2 epochs of 3 batches
    assert len(ck1.history) == ck1.step and all(np.isfinite(ck1.history))


def test_stage1_leaves_stage_two_groups_untouched(setup):
    cfg, _, ck1, _ = setup
    fresh = group_hashes(MDIQA(cfg.model))
    m = ck1.build_model()
    trained = group_hashes(m)
    for g in ("heads.injection", "weight_branch", "fusion", "semantic_encoder"):
        assert trained[g] == fresh[g], g
    for g in ("backbone.technical", "backbone.aesthetic", "heads.csam", "heads.regressor"):
        assert trained[g] != fresh[g], g


def test_stage2_freezes_backbones_and_csam(setup):
    _, _, ck1, ck2 = setup
    h1, h2 = group_hashes(ck1.build_model()), group_hashes(ck2.build_model())
    for g in ("backbone.technical", "backbone.aesthetic", "heads.csam", "semantic_encoder"):
        assert h1[g] == h2[g], g
    for g in ("heads.injection", "weight_branch", "fusion", "heads.regressor"):
        assert h1[g] != h2[g], g
    assert ck2.extra["complete"] and ck2.build_model().inject


def test_stage2_without_regressor_finetune(setup):
    cfg, data, ck1, _ = setup
    cfg2 = replace(cfg, model=replace(cfg.model, finetune_regressor=False))
    assert "heads.regressor" not in stage_two_trainable(cfg2)
    ck1b = replace(ck1, config=cfg2.to_dict())
    ck2 = train_stage2(data, ck1b, cfg2, max_steps=2)
    assert group_hashes(ck2.build_model())["heads.regressor"] == \
        group_hashes(ck1.build_model())["heads.regressor"]


def test_stage2_rejects_mismatched_config(setup):
    cfg, data, ck1, _ = setup
    other = replace(cfg, model=replace(cfg.model, head_width=8))
    with pytest.raises(StageError, match="differs"):
        train_stage2(data, ck1, other)


def test_checkpoint_roundtrip_byte_identical(setup, tmp_path):
    _, _, _, ck2 = setup
    save_checkpoint(ck2, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert _equal_params(back.params, ck2.params)
    assert back.history == pytest.approx(ck2.history)


def test_checkpoint_tamper_and_garbage(setup, tmp_path):
    _, _, ck1, _ = setup
    raw = bytearray(checkpoint_bytes(ck1))
    raw[len(raw) // 2] ^= 0x01
    (tmp_path / "t.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "g.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError, match="not an MDIQA"):
        load_checkpoint(tmp_path / "g.ckpt")
    assert checkpoint_bytes(ck1).startswith(MAGIC)


def test_stage1_resume_is_bit_exact(setup, tmp_path):
    cfg, data, ck1, _ = setup
    part = train_stage1(data, cfg, max_steps=4)
    save_checkpoint(part, tmp_path / "p.ckpt")
    done = train_stage1(data, cfg, resume=load_checkpoint(tmp_path / "p.ckpt"))
    assert done.step == ck1.step
    assert _equal_params(done.params, ck1.params)


def test_stage2_resume_is_bit_exact(setup, tmp_path):
    cfg, data, ck1, ck2 = setup
    part = train_stage2(data, ck1, cfg, max_steps=3)
    assert not part.extra["complete"]
    save_checkpoint(part, tmp_path / "p2.ckpt")
    done = train_stage2(data, load_checkpoint(tmp_path / "p2.ckpt"), cfg)
    assert _equal_params(done.params, ck2.params)


def test_training_is_deterministic(setup):
    cfg, data, ck1, _ = setup
    again = train_stage1(data, cfg)
    assert _equal_params(again.params, ck1.params)


def test_stage1_needs_labels(setup):
    cfg, data, _, _ = setup
    x, y, m, o, om = data
    with pytest.raises(StageError, match="no dimension labels"):
        train_stage1((x, y, np.zeros_like(m), o, om), cfg)


def test_masked_dimension_gets_no_gradient():
    cfg = tiny_run_cfg()
    x, y, m, o, om = stack_samples(make_synthetic_dataset(16, 32, seed=1), cfg.model.registry())
    m = m.copy()
    j = cfg.model.registry().index("contrast")
    m[:, j] = False
    ck = train_stage1((x, y, m, o, om), cfg, max_steps=2)
    fresh, trained = MDIQA(cfg.model), ck.build_model()
    for (k, a), b in zip(fresh.heads["contrast"].named_parameters(),
                         trained.heads["contrast"].parameters()):
        # AdamW's decoupled decay still shrinks weights slightly, but no gradient step happens
        assert torch.allclose(a, b, rtol=1e-4, atol=1e-9), k


def test_predictor_shapes(setup):
    _, data, _, ck2 = setup
    ds, ov = predictor(ck2.build_model())(data[0][:5])
    assert ds.shape == (5, 9) and ov.shape == (5,)
