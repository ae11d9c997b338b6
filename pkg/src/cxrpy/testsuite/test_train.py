from __future__ import annotations

import dataclasses
import json
import math
from types import SimpleNamespace

import pytest
import torch

from cxrpy.backend import STEM, FreezePolicy, apply_freeze_policy, block_group, stub_backend
from cxrpy.checkpoint import Checkpoint
from cxrpy.error import (
    ConfigError,
    EmptyDatasetError,
    ModelError,
    SamplingError,
    TrainingAborted,
)
from cxrpy.head import HeadConfig, build_head
from cxrpy.imaging import AugmentationSpec, XrayDataset
from cxrpy.manifest import DatasetManifest
from cxrpy.sampling import FewShotSubset, sample_few_shot
from cxrpy.testsuite.helpers import two_class_toy
from cxrpy.train import (
    AdaptationConfig,
    EpochRecord,
    FewShotConfig,
    TrainingTrace,
    adapt,
    build_plateau_scheduler,
    clip_gradients,
    fewshot_finetune,
)

# Classes without positives in the toy data trigger undefined-AUC warnings.
pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")

FAST = AdaptationConfig(
    head_lr=1e-2,
    batch_size=8,
    max_epochs=10,
    early_stop_patience=10,
)


def _adapt(backend, head, sets, policy, config=FAST):
    apply_freeze_policy(backend, policy, head)
    return adapt(backend, head, *sets, config, freeze_policy=policy)


def test_frozen_groups_untouched(backend, head, toy_sets):
    policy = FreezePolicy(1, True)
    groups = backend.parameter_groups()
    frozen_names = [STEM, *(block_group(i) for i in range(len(backend.visual_blocks) - 1))]
    before = {name: [p.detach().clone() for p in groups[name]] for name in frozen_names}
    top_before = [p.detach().clone() for p in groups[block_group(len(backend.visual_blocks) - 1)]]

    _adapt(backend, head, toy_sets, policy)

    groups = backend.parameter_groups()
    for name in frozen_names:
        for old, new in zip(before[name], groups[name]):
            assert torch.equal(old, new)
    top_after = groups[block_group(len(backend.visual_blocks) - 1)]
    assert any(not torch.equal(a, b) for a, b in zip(top_before, top_after))


def test_learns_separable_toy(backend, head, toy_sets):
    result = _adapt(backend, head, toy_sets, FreezePolicy(1, True))
    records = result.trace.records
    assert len(records) == 10
    assert records[-1].train_loss < records[0].train_loss
    assert result.best_val_auc > 0.9
    assert result.best_val_auc == max(r.val_mean_auc for r in records)
    assert result.checkpoint.adapted
    assert result.checkpoint.epoch == result.best_epoch
    assert set(records[0].learning_rates) == {"encoder", "head"}


def test_adapt_is_deterministic(toy_sets):
    pool, source = two_class_toy(24, seed=0)
    augmented = XrayDataset(pool, source, augmentation=AugmentationSpec())

    def once():
        backend = stub_backend(seed=7, embed_dim=32, n_blocks=4)
        head = build_head(HeadConfig(in_dim=32), init_seed=7)
        config = dataclasses.replace(FAST, max_epochs=3)
        sets = (augmented, toy_sets[1])
        return _adapt(backend, head, sets, FreezePolicy(2, True), config)

    a, b = once(), once()
    assert a.trace == b.trace
    assert a.checkpoint.encoder_digest == b.checkpoint.encoder_digest
    assert a.checkpoint.head_digest == b.checkpoint.head_digest


def test_head_only_when_encoder_frozen(backend, head, toy_sets):
    config = dataclasses.replace(FAST, max_epochs=1)
    result = _adapt(backend, head, toy_sets, FreezePolicy(0, False), config)
    assert set(result.trace.records[0].learning_rates) == {"head"}


def test_empty_sets(backend, head, toy_sets):
    train, val = toy_sets
    empty = XrayDataset(DatasetManifest(()), train.source)
    with pytest.raises(EmptyDatasetError):
        adapt(backend, head, empty, val, FAST)
    with pytest.raises(EmptyDatasetError):
        adapt(backend, head, train, empty, FAST)


def test_head_width_mismatch(backend, toy_sets):
    head = build_head(HeadConfig(in_dim=16), init_seed=7)
    with pytest.raises(ModelError):
        adapt(backend, head, *toy_sets, FAST)


def test_config_validation():
    with pytest.raises(ConfigError) as exc:
        AdaptationConfig(encoder_lr=1e-3, head_lr=1e-4, batch_size=0)
    assert len(exc.value.problems) == 2
    with pytest.raises(ConfigError):
        FewShotConfig(epochs=0)


def _dummy_optimizer(lr=1.0):
    param = torch.nn.Parameter(torch.zeros(1))
    return torch.optim.SGD([dict(params=[param], lr=lr)])


def test_plateau_halves_after_two_stagnant_epochs():
    optimizer = _dummy_optimizer()
    scheduler = build_plateau_scheduler(optimizer, patience=2, factor=0.5)
    lrs = []
    for metric in (0.5, 0.5, 0.5, 0.5, 0.5):
        scheduler.step(metric)
        lrs.append(optimizer.param_groups[0]["lr"])
    assert lrs == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_plateau_improvement_resets():
    optimizer = _dummy_optimizer()
    scheduler = build_plateau_scheduler(optimizer, patience=2)
    for metric in (0.5, 0.5, 0.6, 0.6, 0.7):
        scheduler.step(metric)
    assert optimizer.param_groups[0]["lr"] == 1.0


def test_plateau_floor():
    optimizer = _dummy_optimizer(lr=1e-7)
    scheduler = build_plateau_scheduler(optimizer, patience=1)
    for _ in range(5):
        scheduler.step(0.5)
    assert optimizer.param_groups[0]["lr"] == pytest.approx(1e-7)


def _with_grad(values):
    p = torch.nn.Parameter(torch.zeros(len(values), dtype=torch.float64))
    p.grad = torch.tensor(values, dtype=torch.float64)
    return p


def test_clip_below_threshold():
    p = _with_grad([0.3, 0.4])
    assert clip_gradients([p], 1.0) == 1.0
    torch.testing.assert_close(p.grad, torch.tensor([0.3, 0.4], dtype=torch.float64))


def test_clip_above_threshold():
    p, q = _with_grad([0.0, 4.0]), _with_grad([0.0])
    factor = clip_gradients([dict(params=[p, q])], 1.0)
    assert factor == pytest.approx(0.25, rel=1e-5)
    assert torch.linalg.vector_norm(p.grad).item() == pytest.approx(1.0, rel=1e-5)


def test_clip_zero_and_missing_grads():
    p = _with_grad([0.0, 0.0])
    assert clip_gradients([p], 1.0) == 1.0
    assert torch.equal(p.grad, torch.zeros(2, dtype=torch.float64))
    assert clip_gradients([torch.nn.Parameter(torch.ones(2))], 1.0) == 1.0


def test_trace_ignores_wall_time(tmp_path):
    rec = dict(stage="adaptation", train_loss=0.5, val_mean_auc=0.7, learning_rates={"head": 1e-4})
    a = TrainingTrace([EpochRecord(epoch=1, wall_time=1.0, **rec)])
    b = TrainingTrace([EpochRecord(epoch=1, wall_time=9.0, **rec)])
    assert a == b
    path = a.save(tmp_path / "trace.jsonl")
    assert TrainingTrace.from_jsonl(path.read_text()) == a
    df = a.as_dataframe()
    assert "learning_rates.head" in df.columns


def test_trace_metadata_on_every_line():
    rec = dict(stage="few-shot", train_loss=0.5, val_mean_auc=None, learning_rates={})
    trace = TrainingTrace(
        [EpochRecord(epoch=e, wall_time=0.0, **rec) for e in (1, 2)],
        metadata={"config_digest": "00ff00ff00ff00ff", "seed": 3},
    )
    lines = [json.loads(line) for line in trace.to_jsonl().splitlines()]
    assert [(d["config_digest"], d["seed"], d["epoch"]) for d in lines] == [
        ("00ff00ff00ff00ff", 3, 1),
        ("00ff00ff00ff00ff", 3, 2),
    ]
    again = TrainingTrace.from_jsonl(trace.to_jsonl())
    assert again == trace
    assert again.metadata == trace.metadata


def test_trace_epochs_increase():
    trace = TrainingTrace()
    trace.append(EpochRecord("x", 2, 0.1, None, {}, 0.0))
    with pytest.raises(ValueError):
        trace.append(EpochRecord("x", 2, 0.1, None, {}, 0.0))


@pytest.fixture
def fewshot_inputs(backend, head):
    pool, source = two_class_toy(24, seed=0)
    checkpoint = Checkpoint.capture(
        backend, head, freeze_policy=FreezePolicy(), seed=7, adapted=True
    )
    subset = sample_few_shot(pool, 4, 7)
    return checkpoint, subset, pool, source


FEWSHOT = FewShotConfig(head_lr=1e-2, batch_size=4, epochs=20)


def test_fewshot_touches_only_the_head(fewshot_inputs):
    checkpoint, subset, pool, source = fewshot_inputs
    result = fewshot_finetune(checkpoint, subset, pool, source, FEWSHOT)
    assert result.checkpoint.encoder_digest == checkpoint.encoder_digest
    assert result.checkpoint.head_digest != checkpoint.head_digest
    records = result.trace.records
    assert len(records) == 20
    assert records[-1].train_loss < records[0].train_loss
    assert records[0].stage == "fewshot-4"
    assert result.checkpoint.adapted
    assert len(result.checkpoint.history) == len(checkpoint.history) + 20


def test_fewshot_is_deterministic(fewshot_inputs):
    checkpoint, subset, pool, source = fewshot_inputs
    a = fewshot_finetune(checkpoint, subset, pool, source, FEWSHOT)
    b = fewshot_finetune(checkpoint, subset, pool, source, FEWSHOT)
    assert a.checkpoint.head_digest == b.checkpoint.head_digest
    assert a.trace == b.trace


def test_fewshot_rejects_unadapted(fewshot_inputs):
    checkpoint, subset, pool, source = fewshot_inputs
    raw = dataclasses.replace(checkpoint, adapted=False)
    with pytest.raises(ModelError):
        fewshot_finetune(raw, subset, pool, source, FEWSHOT)
    result = fewshot_finetune(
        raw, subset, pool, source, dataclasses.replace(FEWSHOT, epochs=1), allow_unadapted=True
    )
    assert len(result.trace) == 1


def test_fewshot_empty_or_foreign_subset(fewshot_inputs):
    checkpoint, _, pool, source = fewshot_inputs
    empty = FewShotSubset(1, frozenset(), 7, (0,) * 14)
    with pytest.raises(SamplingError):
        fewshot_finetune(checkpoint, empty, pool, source, FEWSHOT)
    foreign = FewShotSubset(1, frozenset({"elsewhere.png"}), 7, (0,) * 14)
    with pytest.raises(SamplingError):
        fewshot_finetune(checkpoint, foreign, pool, source, FEWSHOT)


def test_stagnant_validation_halves_both_groups_once(
    backend, head, toy_sets, monkeypatch
):
    monkeypatch.setattr("cxrpy.train.evaluate", lambda matrix: SimpleNamespace(mean_auc=0.5))
    config = dataclasses.replace(FAST, max_epochs=4)
    result = _adapt(backend, head, toy_sets, FreezePolicy(1, True), config)
    lrs = [r.learning_rates for r in result.trace.records]
    start = {"encoder": config.encoder_lr, "head": config.head_lr}
    halved = {name: lr / 2 for name, lr in start.items()}
    assert lrs[0] == start
    assert lrs[1] == start
    assert lrs[2] == pytest.approx(halved)
    assert lrs[3] == pytest.approx(halved)


def _diverge(head):
    with torch.no_grad():
        head.output_layer.bias.fill_(math.nan)


def test_diverged_logits_abort_adaptation(backend, head, toy_sets):
    _diverge(head)
    with pytest.raises(TrainingAborted) as exc:
        _adapt(backend, head, toy_sets, FreezePolicy(1, True))
    assert exc.value.stage == "adaptation"
    assert (exc.value.epoch, exc.value.step) == (1, 0)
    assert math.isnan(exc.value.loss)
    assert set(exc.value.details["lrs"]) == {"encoder", "head"}


def test_diverged_head_aborts_fewshot(backend, head):
    pool, source = two_class_toy(24, seed=0)
    _diverge(head)
    checkpoint = Checkpoint.capture(
        backend, head, freeze_policy=FreezePolicy(), seed=7, adapted=True
    )
    with pytest.raises(TrainingAborted) as exc:
        fewshot_finetune(checkpoint, sample_few_shot(pool, 4, 7), pool, source, FEWSHOT)
    assert exc.value.stage == "few-shot"
    assert math.isnan(exc.value.loss)
