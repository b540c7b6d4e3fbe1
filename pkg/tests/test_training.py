import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ageus import nets
from ageus.core import FemurAnnotation, load_study_dir
from ageus.training import (
    AccessLog,
    SplitPlan,
    StudySource,
    TrainConfig,
    carve_validation,
    femur_target,
    finetune_seg,
    make_split,
    pretrain_seg,
    train_femur,
    validation_curve,
)

TINY = nets.NetConfig(base_width=8)


def cfg(**kw):
    base = dict(image_size=32, batch_size=4, val_every=1, checkpoint_every=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def ids(n):
    return [f"S{i:04d}" for i in range(n)]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=0)
    with pytest.raises(ValueError):
        TrainConfig(image_size=100)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_split_counts_114():
    s = make_split(ids(114))
    assert (len(s.train_ids), len(s.val_ids), len(s.test_ids)) == (77, 9, 28)


@given(st.integers(4, 300), st.integers(0, 1000))
def test_split_partitions_ids(n, seed):
    s = make_split(ids(n), seed=seed)
    all_ids = set(s.train_ids) | set(s.val_ids) | set(s.test_ids)
    assert all_ids == set(ids(n))
    assert len(s.train_ids) + len(s.val_ids) + len(s.test_ids) == n
    assert s.train_ids and s.val_ids and s.test_ids
    assert abs(len(s.test_ids) - 0.25 * n) <= 1


def test_split_deterministic_and_seeded():
    assert make_split(ids(50), seed=3) == make_split(ids(50), seed=3)
    assert make_split(ids(50), seed=3) != make_split(ids(50), seed=4)
    assert make_split(ids(50), seed=3) == make_split(list(reversed(ids(50))), seed=3)


def test_split_round_trip_and_overlap():
    s = make_split(ids(20))
    assert SplitPlan.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    with pytest.raises(ValueError):
        SplitPlan(("a", "b"), ("b",), ("c",))
    with pytest.raises(ValueError):
        make_split(ids(3))


def test_carve_validation():
    train, val = carve_validation(ids(30), 0.1, 0)
    assert len(val) == 3 and not set(train) & set(val)


def test_femur_target_at_model_resolution():
    ann = FemurAnnotation((100.0, 40.0), (100.0, 200.0))
    t = femur_target(ann, (256, 256), 64)
    assert t.shape == (64, 64)
    assert t.min() == 0.0 and t.max() == 1.0
    assert t[25, 10] == 0.0 and t[25, 50] == 0.0


def _shared(seed=0):
    return nets.build_shared_unet(TINY, seed=seed)


def test_pretrain_bookkeeping(small_dataset, tmp_path):
    c = cfg(val_every=2, checkpoint_every=3)
    log = tmp_path / "log.jsonl"
    ck = pretrain_seg(_shared(), small_dataset, c, epochs=5, out_dir=tmp_path, log_path=log)
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert [r["epoch"] for r in lines if r["split"] == "val"] == [2, 4]
    assert [r["epoch"] for r in lines if r["split"] == "train"] == [1, 2, 3, 4, 5]
    assert set(lines[0]) == {"epoch", "split", "loss", "dice_head", "dice_abd", "femur_loss"}
    assert ck["epoch"] in (2, 4)
    curve = validation_curve(ck, "dice_head")
    assert [e for e, _ in curve] == [2, 4]
    best = max(((r["dice_head"] + r["dice_abd"]) / 2, r["epoch"])
               for r in lines if r["split"] == "val")
    assert ck["metric"] == pytest.approx(best[0]) and ck["epoch"] == best[1]
    assert (tmp_path / "best.pt").exists() and (tmp_path / "last.pt").exists()
    assert nets.load_checkpoint(tmp_path / "last.pt")["epoch"] == 5
    assert nets.load_checkpoint(tmp_path / "best.pt")["epoch"] == ck["epoch"]


def test_training_deterministic(small_dataset):
    a = pretrain_seg(_shared(), small_dataset, cfg(), epochs=2)
    b = pretrain_seg(_shared(), small_dataset, cfg(), epochs=2)
    assert all(torch.equal(a["state_dict"][k], b["state_dict"][k]) for k in a["state_dict"])
    assert a["extra"]["history"] == b["extra"]["history"]


def test_resume_matches_uninterrupted(small_dataset, tmp_path):
    c = cfg(val_every=2, checkpoint_every=2)
    full = pretrain_seg(_shared(), small_dataset, c, epochs=4, out_dir=tmp_path / "a")
    pretrain_seg(_shared(), small_dataset, c, epochs=2, out_dir=tmp_path / "b")
    resumed = pretrain_seg(_shared(seed=99), small_dataset, c, epochs=4, out_dir=tmp_path / "b",
                           resume=tmp_path / "b" / "last.pt")
    assert full["extra"]["history"] == resumed["extra"]["history"]
    last_a = nets.load_checkpoint(tmp_path / "a" / "last.pt")["state_dict"]
    last_b = nets.load_checkpoint(tmp_path / "b" / "last.pt")["state_dict"]
    assert all(torch.allclose(last_a[k], last_b[k]) for k in last_a)


def test_test_split_never_touched(small_dataset, tmp_path):
    source = StudySource.from_dir(small_dataset)
    split = make_split(source, cfg())
    log = AccessLog()
    ck = pretrain_seg(_shared(), small_dataset, cfg(), split=split, epochs=1, access_log=log)
    finetune_seg(ck, small_dataset, cfg(), split=split, epochs=1, access_log=log)
    train_femur(nets.build_femur_unet(TINY, seed=0), small_dataset, cfg(), split=split,
                epochs=1, access_log=log)
    assert not log.ids() & set(split.test_ids)
    assert log.ids("train") == set(split.train_ids)
    assert log.ids("val") == set(split.val_ids)


def test_finetune_starts_from_checkpoint(small_dataset):
    ck = pretrain_seg(_shared(), small_dataset, cfg(), epochs=1)
    ft = finetune_seg(ck, small_dataset, cfg(lr=1e-12), epochs=1)
    for k, v in ck["state_dict"].items():
        if v.is_floating_point():
            assert torch.allclose(v, ft["state_dict"][k], atol=1e-6)
    assert ft["extra"]["stage"] == "finetune"


def test_finetune_rejects_femur_checkpoint(small_dataset):
    ck = train_femur(nets.build_femur_unet(TINY, seed=0), small_dataset, cfg(), epochs=1)
    assert ck["metric"] > 0
    with pytest.raises(ValueError):
        finetune_seg(ck, small_dataset, cfg(), epochs=1)


def test_missing_branch_warns(small_dataset):
    recs = load_study_dir(small_dataset)
    for r in recs:
        r.abdomen_mask = None
    with pytest.warns(UserWarning, match="abdomen"):
        ck = pretrain_seg(_shared(), recs, cfg(), epochs=1)
    assert ck["extra"]["history"][-1]["dice_abd"] is None


def test_femur_without_annotations(small_dataset):
    recs = load_study_dir(small_dataset)
    for r in recs:
        r.femur_annotation = None
    with pytest.raises(ValueError, match="femur"):
        train_femur(nets.build_femur_unet(TINY, seed=0), recs, cfg(), epochs=1)


@pytest.mark.slow
def test_loss_decreases_on_fixed_batch(small_dataset):
    ck = pretrain_seg(_shared(), small_dataset, cfg(lr=3e-3), epochs=15)
    train = [r["loss"] for r in ck["extra"]["history"] if r["split"] == "train"]
    assert train[-1] < 0.6 * train[0]
