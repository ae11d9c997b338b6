from __future__ import annotations

import os

import pytest
import torch

from cxrpy.backend import (
    HEAD,
    POST,
    STEM,
    FreezePolicy,
    OpenClipBackend,
    apply_freeze_policy,
    backend_from_description,
    block_group,
    image_features,
    stub_backend,
)
from cxrpy.checkpoint import Checkpoint
from cxrpy.error import ConfigError, ModelError
from cxrpy.head import HeadConfig, build_head, head_parameter_count
from cxrpy.prompts import PromptSet


def test_freeze_nothing(backend):
    summary = apply_freeze_policy(backend, FreezePolicy(0, False))
    assert summary.encoder_trainable_count == 0
    assert backend.trainable_parameters() == []
    assert summary.trainable_fraction == 0.0


def test_unfreeze_everything(backend):
    summary = apply_freeze_policy(backend, FreezePolicy(len(backend.visual_blocks), True))
    assert summary.trainable_count == backend.visual_parameter_count()
    assert all(p.requires_grad for p in backend.parameters())


def test_top_blocks_only(backend):
    summary = apply_freeze_policy(backend, FreezePolicy(1, True))
    n = len(backend.visual_blocks)
    assert summary.flags[block_group(n - 1)]
    assert not any(summary.flags[block_group(i)] for i in range(n - 1))
    assert summary.flags[POST]
    assert not summary.flags[STEM]


def test_monotone_in_k(backend):
    counts = [
        apply_freeze_policy(backend, FreezePolicy(k, flag)).trainable_count
        for flag in (False, True)
        for k in range(len(backend.visual_blocks) + 1)
    ]
    half = len(counts) // 2
    for series in (counts[:half], counts[half:]):
        assert series == sorted(series)


@pytest.mark.parametrize("k", [0, 1, 2, 4])
def test_partition_is_exhaustive(backend, k):
    summary = apply_freeze_policy(backend, FreezePolicy(k, k % 2 == 0))
    groups = backend.parameter_groups()
    ids = [id(p) for params in groups.values() for p in params]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(p) for p in backend.parameters()}
    frozen = sum(c for name, c in summary.group_counts.items() if not summary.flags[name])
    assert summary.trainable_count + frozen == summary.total_count
    for name, params in groups.items():
        assert all(p.requires_grad == summary.flags[name] for p in params)


def test_head_counts_toward_both_totals(backend, head):
    summary = apply_freeze_policy(backend, FreezePolicy(0, False), head)
    n_head = head_parameter_count(head.config)
    assert summary.group_counts[HEAD] == n_head
    assert summary.trainable_count == n_head
    assert summary.total_count == backend.visual_parameter_count() + n_head


def test_too_many_blocks(backend):
    with pytest.raises(ModelError):
        apply_freeze_policy(backend, FreezePolicy(len(backend.visual_blocks) + 1))


def test_negative_k():
    with pytest.raises(ConfigError):
        FreezePolicy(-1)


def test_stub_is_deterministic(images):
    a = stub_backend(seed=3).eval()
    b = stub_backend(seed=3).eval()
    with torch.no_grad():
        torch.testing.assert_close(image_features(a, images), image_features(b, images), rtol=0, atol=0)
        assert torch.isfinite(image_features(a, images)).all()
    assert stub_backend(seed=4).state_dict()["proj"].ne(a.state_dict()["proj"]).any()


def test_batch_independence(images):
    model = stub_backend().eval()
    batch = torch.cat([images, images])
    with torch.no_grad():
        full = image_features(model, batch)
        single = image_features(model, images[2:3])
    assert full.shape == (8, model.embed_dim)
    torch.testing.assert_close(full[2:3], single, rtol=1e-5, atol=1e-6)


def test_text_embeddings():
    model = stub_backend()
    prompts = PromptSet().render()
    emb = model.encode_text(prompts)
    assert emb.shape == (14, model.embed_dim)
    assert len({tuple(row.tolist()) for row in emb}) == 14
    torch.testing.assert_close(emb, model.encode_text(prompts), rtol=0, atol=0)


def test_no_text_encoder():
    model = stub_backend(with_text=False)
    assert not model.has_text_encoder
    with pytest.raises(ModelError):
        model.encode_text(["No finding"])


def test_bad_input_shape(backend):
    with pytest.raises(ModelError):
        image_features(backend, torch.zeros(2, 3, 128, 128))
    with pytest.raises(ModelError):
        image_features(backend, torch.zeros(3, 224, 224))


def test_rebuild_from_description(backend):
    clone = backend_from_description(backend.describe())
    clone.load_state_dict(backend.state_dict())
    assert clone.describe() == backend.describe()


def test_real_backend_needs_local_weights(tmp_path):
    with pytest.raises(ModelError):
        OpenClipBackend(tmp_path / "missing.bin")


def test_real_backend_trainable_count():
    weights = os.environ.get("CXRPY_CLIP_WEIGHTS")
    if not weights:
        pytest.skip("set CXRPY_CLIP_WEIGHTS to a local ViT-B-32 checkpoint")
    pytest.importorskip("open_clip")
    from cxrpy.head import HeadConfig, build_head

    model = OpenClipBackend(weights)
    summary = apply_freeze_policy(model, FreezePolicy(3, True), build_head(HeadConfig(), 7))
    assert summary.trainable_count == pytest.approx(22_057_486, rel=0.01)
    assert summary.trainable_fraction == pytest.approx(0.2499, abs=0.005)


def test_logit_scale_survives_rebuild(tmp_path):
    sharp = stub_backend(seed=3, embed_dim=16, n_blocks=2, logit_scale=50.0)
    assert backend_from_description(sharp.describe()).logit_scale == 50.0
    head = build_head(HeadConfig(in_dim=16), init_seed=3)
    snapshot = Checkpoint.capture(
        sharp, head, freeze_policy=FreezePolicy(1, True), seed=3, adapted=False
    )
    saved = snapshot.save(tmp_path / "sharp.pt")
    assert Checkpoint.load(saved).restore_backend().logit_scale == 50.0
    with pytest.raises(ModelError):
        stub_backend(logit_scale=0.0)


def test_frozen_count_complements_trainable(backend, head):
    summary = apply_freeze_policy(backend, FreezePolicy(2, False), head)
    frozen = sum(p.numel() for p in backend.parameters() if not p.requires_grad)
    assert summary.frozen_count == frozen == summary.total_count - summary.trainable_count
