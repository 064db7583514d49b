import math

import numpy as np
import pytest
import torch

from mmslt.config import ConfigError, PipelineConfig, apply_overrides, load_config, toy_config
from mmslt.engine import (ABLATION_ROWS, CheckpointError, MissingPrerequisite, ablation_config, build_model,
                          cosine_lr, load_checkpoint, make_batch, read_log, run_stage, save_checkpoint)
from mmslt.gsd import DescriptionCache, GlyphMockClient, generate_corpus
from mmslt.models import MMSLT, ModelProfile, build_description_encoder, checksum
from mmslt.pretrain import AlignmentHead, FeatureStore, build_features, stage1_forward
from mmslt.translate import teacher_forced_loss


def test_cosine_endpoints_and_monotone():
    lrs = [cosine_lr(s, 50, 1e-3, 1e-6) for s in range(51)]
    assert abs(lrs[0] - 1e-3) < 1e-12 and abs(lrs[-1] - 1e-6) < 1e-12
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(25, 50, 1.0, 0.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        cosine_lr(51, 50, 1.0, 0.0)


def test_warmup():
    assert cosine_lr(0, 100, 1.0, 0.0, warmup_steps=4) == 0.25
    assert cosine_lr(3, 100, 1.0, 0.0, warmup_steps=4) == 1.0


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = load_config(None, ["slt.epochs=3", "decode.beam_size=2", "mmlp.lr_max=5e-3"], "toy")
    assert (cfg.slt.epochs, cfg.decode.beam_size, cfg.mmlp.lr_max) == (3, 2, 5e-3)
    cfg.dump(tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml").hash() == cfg.hash()
    assert PipelineConfig().profile.name == "full"
    with pytest.raises(ConfigError):
        apply_overrides(cfg.to_dict(), ["slt.nope=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["mmlp.lr_min=1.0"], "toy")
    with pytest.raises(ConfigError):
        load_config(None, ["profile.heads=5"], "toy")
    (tmp_path / "bad.yaml").write_text("slt: [1, 2]\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_full_profile_dimensions():
    p = ModelProfile.full()
    assert (p.visual_dim, p.desc_dim, p.model_dim, p.lora_rank, p.lora_alpha) == (512, 768, 1024, 16, 32.0)


@pytest.mark.parametrize("mode", ["none", "direct", "mapped"])
def test_forward_shapes(mode, small_ds, tiny_profile):
    m = MMSLT(tiny_profile, len(small_ds.vocab), mode)
    vids = small_ds.split("train")[:3]
    desc = [np.random.default_rng(0).normal(size=(v.num_frames, tiny_profile.desc_dim)).astype("f4") for v in vids]
    from mmslt.data import collate
    from mmslt.engine import FramePipeline

    b = collate(vids, small_ds.vocab, FramePipeline(tiny_profile), desc if mode != "none" else None)
    M, V, D_hat = m.encode_video(b.frames, b.frame_mask, b.descriptions)
    T = b.frame_mask.shape[1]
    assert M.values.shape == (3, -(-T // 2), tiny_profile.model_dim)
    assert (D_hat is not None) == (mode == "mapped")
    loss = teacher_forced_loss(b, m, small_ds.vocab)
    assert torch.isfinite(loss)


def test_trainable_groups(tiny_profile):
    m = MMSLT(tiny_profile, 12)
    m.configure_trainable("mmlp")
    assert all(p.requires_grad for p in m.dm.parameters())
    assert not any(p.requires_grad for p in m.te.parameters())
    assert not any(p.requires_grad for p in m.dec.parameters())
    assert not any(p.requires_grad for p in m.frozen_base_parameters().values())
    m.configure_trainable("slt")
    assert not any(p.requires_grad for p in m.dm.parameters())
    assert any(p.requires_grad for n, p in m.dec.named_parameters() if "lora_" in n)
    # decoder embedding starts as a copy of the text encoder's and is its own output projection
    assert m.dec.embed is not m.te.embed
    assert torch.equal(m.dec.embed.weight, m.te.embed.weight)


def _features(ds, cfg):
    sets = generate_corpus(ds.items, cfg.gsd.prompt_id, GlyphMockClient.from_dataset(ds), DescriptionCache())
    return FeatureStore(*_pack(build_features(sets, build_description_encoder(cfg.profile, 1))))


def _pack(feats):
    rows, index, off = [], {}, 0
    for k, a in feats.items():
        index[k] = (off, a.shape[0])
        rows.append(a)
        off += a.shape[0]
    return np.concatenate(rows), index, {}


def test_feature_store_roundtrip(tmp_path, small_ds):
    cfg = toy_config()
    fs = _features(small_ds, cfg)
    FeatureStore.write(tmp_path / "f.mmfs", {k: fs.get(k) for k in fs.index}, {"config_hash": "abc"})
    back = FeatureStore.open(tmp_path / "f.mmfs", "abc")
    v = small_ds.items[0].id
    assert np.array_equal(back.get(v), fs.get(v))
    from mmslt.pretrain import StaleFeatureStore

    with pytest.raises(StaleFeatureStore):
        FeatureStore.open(tmp_path / "f.mmfs", "other")


def test_checkpoint_roundtrip(tmp_path, small_ds):
    cfg = toy_config()
    fs = _features(small_ds, cfg)
    m = build_model(cfg, len(small_ds.vocab))
    m.configure_trainable("mmlp")
    head = AlignmentHead()
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.01 * torch.randn_like(p))
        head.log_inv_tau.add_(0.3)
    save_checkpoint(tmp_path / "ck", m, {"step": 7}, head)
    m2, head2 = build_model(cfg, len(small_ds.vocab)), AlignmentHead()
    assert load_checkpoint(tmp_path / "ck", m2, head2)["step"] == 7
    for (n, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), n
    assert torch.equal(head.log_inv_tau, head2.log_inv_tau)
    batch = make_batch(small_ds.split("dev"), small_ds, cfg.profile, fs, True)
    m.eval(), m2.eval()
    with torch.no_grad():
        l1 = stage1_forward(batch, m, head)[0]["loss_mmlp"]
        l2 = stage1_forward(batch, m2, head2)[0]["loss_mmlp"]
    assert abs(l1.item() - l2.item()) <= 1e-7


def test_checkpoint_shape_mismatch(tmp_path, small_ds):
    cfg = toy_config()
    save_checkpoint(tmp_path / "ck", build_model(cfg, len(small_ds.vocab)), {})
    other = toy_config()
    other.profile.visual_dim = 32
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck", build_model(other, len(small_ds.vocab)))
    with pytest.raises(MissingPrerequisite):
        load_checkpoint(tmp_path / "nothing", build_model(cfg, len(small_ds.vocab)))


def test_finetune_requires_init(tmp_path, small_ds, fast_cfg):
    with pytest.raises(MissingPrerequisite):
        run_stage(fast_cfg, "slt", small_ds, tmp_path / "ck", tmp_path / "log.jsonl")


def test_resume_matches_uninterrupted(tmp_path, small_ds, fast_cfg):
    fast_cfg.mmlp.epochs = 2
    fs = _features(small_ds, fast_cfg)
    full = run_stage(fast_cfg, "mmlp", small_ds, tmp_path / "a", tmp_path / "a.jsonl", fs)
    run_stage(fast_cfg, "mmlp", small_ds, tmp_path / "b", tmp_path / "b.jsonl", fs, stop_after_steps=3)
    run_stage(fast_cfg, "mmlp", small_ds, tmp_path / "b", tmp_path / "b.jsonl", fs, resume=True)
    assert read_log(full.log) == read_log(tmp_path / "b.jsonl")


def test_ablation_rows(fast_cfg):
    assert [r[0] for r in ABLATION_ROWS] == [1, 2, 3, 4, 5]
    five, pre5 = ablation_config(fast_cfg, 5)
    assert pre5 and five.model.desc_mode == "mapped" and five.mmlp.use_align and five.mmlp.use_dm
    one, pre1 = ablation_config(fast_cfg, 1)
    assert not pre1 and one.model.desc_mode == "none"
    two, pre2 = ablation_config(fast_cfg, 2)
    assert not pre2 and two.model.desc_mode == "direct"
    four, _ = ablation_config(fast_cfg, 4)
    assert four.model.desc_mode == "direct" and four.mmlp.use_align and not four.mmlp.use_dm
