import logging

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgnet.data import ScaleType
from sgnet.edit import (CropCandidate, EditPlan, EditSegment, PlanError, identity_plan,
                        parse_segments, propose_crops, rank_candidates, rect_contains, render_edit,
                        sidecar_path)
from sgnet.fixtures import render_shot
from sgnet.media import read_video, write_video
from sgnet.model import Task
from sgnet.train import load_checkpoint, model_predictor
from sgnet.media import SourceCache


def test_full_frame_anchor():
    (r,) = propose_crops((64, 48), anchor=(0, 0, 64, 48), k=1, seed=0)
    assert rect_contains(r, (32, 24))
    x, y, w, h = r
    assert x >= 0 and y >= 0 and x + w <= 64 and y + h <= 48


def test_proposals_deterministic():
    assert propose_crops((64, 64), k=50, seed=7) == propose_crops((64, 64), k=50, seed=7)
    assert propose_crops((64, 64), k=50, seed=7) != propose_crops((64, 64), k=50, seed=8)


def test_anchor_containment():
    rects = propose_crops((64, 64), anchor=(10, 10, 20, 20), k=20, seed=0)
    assert len(rects) == 20 and all(rect_contains(r, (20, 20)) for r in rects)


def test_anchor_out_of_bounds():
    with pytest.raises(PlanError):
        propose_crops((64, 64), anchor=(50, 50, 20, 20), k=3)
    with pytest.raises(ValueError):
        propose_crops((64, 64), k=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(16, 200), st.integers(16, 200), st.integers(0, 2 ** 31 - 1), st.data())
def test_proposals_inside_frame(w, h, seed, data):
    ax = data.draw(st.integers(0, w - 1))
    ay = data.draw(st.integers(0, h - 1))
    rects = propose_crops((w, h), anchor=(ax, ay, 1, 1), k=30, seed=seed)
    heights = set()
    for x, y, rw, rh in rects:
        assert 0 <= x and 0 <= y and x + rw <= w and y + rh <= h
        assert rw >= 8 and rh >= 8
        assert x <= ax < x + rw and y <= ay < y + rh
        heights.add(rh)
    assert len(heights) > 3  # varied scales


def test_parse_segments():
    assert parse_segments("", 0, 24) == [(0, 24)]
    assert parse_segments("0:12,12:24", 0, 24) == [(0, 12), (12, 24)]
    with pytest.raises(PlanError):
        parse_segments("0-12", 0, 24)


# -------------------------------------------------------------- rendering

@pytest.fixture
def source_video(tmp_path):
    frames, _ = render_shot("FS", "static", n_frames=12, size=64, seed=2)
    return write_video(tmp_path / "src.avi", frames), frames


def test_identity_plan_reproduces_source(source_video, tmp_path):
    path, frames = source_video
    out = render_edit(identity_plan(path, 0, 12, 64, 64, "FS"), tmp_path / "id.avi")
    np.testing.assert_array_equal(read_video(out), frames)


def test_crop_segment_matches_upscaled_region(source_video, tmp_path):
    path, frames = source_video
    rect = (16, 8, 32, 32)
    plan = EditPlan(str(path), 0, 12, 64, 64, "CS",
                    [EditSegment(4, 8, CropCandidate(rect, ScaleType.CS, 0.9))])
    out = read_video(render_edit(plan, tmp_path / "cs.avi"))
    for t in range(12):
        if 4 <= t < 8:
            # reference uses a different interpolator on purpose
            ref = cv2.resize(frames[t, 8:40, 16:48], (64, 64), interpolation=cv2.INTER_LINEAR)
            r = np.corrcoef(out[t].ravel().astype(float), ref.ravel().astype(float))[0, 1]
            assert r >= 0.99
        else:
            np.testing.assert_array_equal(out[t], frames[t])
    back = EditPlan.from_dict(__import__("json").loads(sidecar_path(tmp_path / "cs.avi").read_text()))
    assert back.segments[0].candidate == plan.segments[0].candidate and back.target_scale is ScaleType.CS


def test_invalid_plans_fail_before_writing(source_video, tmp_path):
    path, _ = source_video
    out = tmp_path / "bad.avi"
    for seg in (EditSegment(0, 12, CropCandidate((40, 40, 32, 32), ScaleType.CS, 0.5)),
                EditSegment(0, 12, CropCandidate((0, 0, 32, 32), ScaleType.MS, 0.5)),
                EditSegment(10, 14, CropCandidate((0, 0, 32, 32), ScaleType.CS, 0.5))):
        with pytest.raises(PlanError):
            render_edit(EditPlan(str(path), 0, 12, 64, 64, "CS", [seg]), out)
    overlap = [EditSegment(0, 6, CropCandidate((0, 0, 32, 32), ScaleType.CS, 0.5)),
               EditSegment(5, 9, CropCandidate((0, 0, 32, 32), ScaleType.CS, 0.5))]
    with pytest.raises(PlanError, match="overlap"):
        render_edit(EditPlan(str(path), 0, 12, 64, 64, "CS", overlap), out)
    assert not out.exists()


# ----------------------------------------------------------------- ranking

def test_full_frame_candidate_is_passthrough(scale_checkpoint):
    manifest, ckpt = scale_checkpoint
    model = load_checkpoint(ckpt)
    rec = manifest.records[0]
    raw = read_video(manifest.resolve(rec))
    h, w = raw.shape[1:3]
    reference = model_predictor(model, SourceCache(manifest.root, model.cfg.input_size), n_clips=8)([rec])
    sv = reference[Task.SCALE][0]
    (cand,) = rank_candidates(rec, raw, [(0, 0, w, h)], model, sv.label)
    assert cand.predicted_scale is sv.label and cand.rank == 0
    assert cand.confidence == pytest.approx(sv.probs[sv.label.index], abs=1e-12)


def test_no_match_is_empty_with_warning(scale_checkpoint, caplog):
    from sgnet.edit import score_crops

    manifest, ckpt = scale_checkpoint
    model = load_checkpoint(ckpt)
    rec = manifest.records[0]
    raw = read_video(manifest.resolve(rec))
    full = [(0, 0, 64, 64)]
    predicted = int(score_crops(rec, raw, full, model)[0].argmax())
    other = list(ScaleType)[(predicted + 1) % 5]
    with caplog.at_level(logging.WARNING):
        got = rank_candidates(rec, raw, full, model, other)
    assert got == [] and "none of 1 crops" in caplog.text


def test_candidates_sorted_and_on_target(scale_checkpoint):
    manifest, ckpt = scale_checkpoint
    model = load_checkpoint(ckpt)
    rec = manifest.records[1]
    raw = read_video(manifest.resolve(rec))
    rects = propose_crops((64, 64), k=40, seed=0)
    for target in ScaleType:
        cands = rank_candidates(rec, raw, rects, model, target)
        assert all(c.predicted_scale is target for c in cands)
        conf = [c.confidence for c in cands]
        assert conf == sorted(conf, reverse=True) and [c.rank for c in cands] == list(range(len(cands)))


def test_tight_crop_raises_close_up_probability(scale_checkpoint):
    from sgnet.edit import score_crops
    from sgnet.data import MovementType, ShotRecord, Split

    manifest, ckpt = scale_checkpoint
    model = load_checkpoint(ckpt)
    frames, masks = render_shot("FS", "motion", n_frames=24, size=64, seed=99)
    ys, xs = np.nonzero(masks[12] > 0.5)
    cy, cx = (ys.min() + ys.max()) / 2, (xs.min() + xs.max()) / 2
    side = int(round((ys.max() - ys.min() + 1) / 0.88))
    x0 = int(np.clip(round(cx - side / 2), 0, 64 - side))
    y0 = int(np.clip(round(cy - side / 2), 0, 64 - side))
    rec = ShotRecord("probe", "unused", 0, 24, 24.0, ScaleType.FS, MovementType.MOTION, Split.PREDICT)
    p = score_crops(rec, frames, [(0, 0, 64, 64), (x0, y0, side, side)], model)
    cs = ScaleType.CS.index
    assert p[1, cs] > p[0, cs]
