"""Scale-targeted reframing: propose crop windows, score them with a trained
scale model, and render the chosen crops into a new lossless video."""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from .data import ScaleType, ShotRecord
from .media import ShotSource, read_video, resize_shorter, resize_target, write_video
from .model import Task

log = logging.getLogger(__name__)

Rect = Tuple[int, int, int, int]  # x, y, w, h in source pixels

DEFAULT_TIERS = (0.35, 0.55, 0.75, 1.0)


class PlanError(ValueError):
    pass


def rect_center(rect):
    x, y, w, h = rect
    return x + w / 2.0, y + h / 2.0


def rect_contains(rect, point):
    x, y, w, h = rect
    px, py = int(np.floor(point[0])), int(np.floor(point[1]))
    return x <= px < x + w and y <= py < y + h


def _check_rect(rect, width, height):
    x, y, w, h = (int(v) for v in rect)
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
        raise PlanError(f"crop {tuple(rect)} is not inside the {width}x{height} frame")
    return x, y, w, h


def propose_crops(frame_size, anchor: Optional[Rect] = None, k=100, seed=0, tiers=DEFAULT_TIERS,
                  aspect_jitter=0.1, min_size=8) -> List[Rect]:
    """``k`` crop windows inside a (width, height) frame.

    Sizes cycle through ``tiers`` (fractions of the frame height, jittered by
    10%) so that every candidate scale is represented. When an anchor is given,
    each window contains the anchor's centre pixel.
    """
    width, height = (int(v) for v in frame_size)
    if k < 1:
        raise ValueError("k must be >= 1")
    if anchor is not None:
        _check_rect(anchor, width, height)
        ax, ay = (int(np.floor(v)) for v in rect_center(anchor))
        ax, ay = min(ax, width - 1), min(ay, height - 1)
    rng = np.random.default_rng(seed)
    aspect = width / height
    out = []
    for i in range(k):
        frac = tiers[i % len(tiers)] * rng.uniform(0.9, 1.1)
        h = int(np.clip(round(frac * height), min(min_size, height), height))
        w = int(np.clip(round(h * aspect * rng.uniform(1 - aspect_jitter, 1 + aspect_jitter)),
                        min(min_size, width), width))
        if anchor is None:
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
        else:
            x = int(rng.integers(max(0, ax - w + 1), min(width - w, ax) + 1))
            y = int(rng.integers(max(0, ay - h + 1), min(height - h, ay) + 1))
        out.append((x, y, w, h))
    return out


class CropFrames:
    """Frame sequence view that crops ``rect`` out of full-resolution frames and
    resizes it for the model, one frame at a time."""

    def __init__(self, raw, rect, input_size):
        self.raw = raw
        self.rect = rect
        self.target = resize_target(input_size)
        self._memo = {}

    def __len__(self):
        return len(self.raw)

    def __getitem__(self, t):
        if t not in self._memo:
            x, y, w, h = self.rect
            self._memo[t] = resize_shorter(np.ascontiguousarray(self.raw[t, y:y + h, x:x + w]), self.target)
        return self._memo[t]


@dataclass(frozen=True)
class CropCandidate:
    rect: Rect
    predicted_scale: ScaleType
    confidence: float
    rank: int = 0

    def to_dict(self):
        return {"rect": list(self.rect), "predicted_scale": self.predicted_scale.value,
                "confidence": self.confidence, "rank": self.rank}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(int(v) for v in d["rect"]), ScaleType.parse(d["predicted_scale"]),
                   float(d["confidence"]), int(d.get("rank", 0)))


def score_crops(record: ShotRecord, raw, rects, model, n_clips=8, batch_size=16):
    """Fused scale probabilities (len(rects), 5) for each crop of the shot."""
    from .train import model_predictor

    if Task.SCALE not in model.tasks:
        raise ValueError("candidate ranking needs a model with a scale head")
    sources = [ShotSource(record, CropFrames(raw, r, model.cfg.input_size)) for r in rects]
    predict = model_predictor(model, None, batch_size=batch_size, n_clips=n_clips)
    scores = predict([record] * len(rects), sources)[Task.SCALE]
    return np.stack([s.probs for s in scores])


def rank_candidates(record: ShotRecord, raw, rects, model, target_scale, n_clips=8,
                    batch_size=16) -> List[CropCandidate]:
    """Crops whose predicted scale is ``target_scale``, most confident first.

    ``raw`` holds the shot's frames (T, H, W, 3) uint8 at source resolution.
    Returns an empty list (and logs a warning) when nothing matches.
    """
    target = ScaleType.parse(target_scale)
    if not rects:
        return []
    probs = score_crops(record, raw, rects, model, n_clips, batch_size)
    pred = probs.argmax(1)
    keep = [i for i in range(len(rects)) if pred[i] == target.index]
    keep.sort(key=lambda i: (-probs[i, target.index], i))
    out = [CropCandidate(tuple(int(v) for v in rects[i]), target, float(probs[i, target.index]), rank)
           for rank, i in enumerate(keep)]
    if not out:
        log.warning("%s: none of %d crops is predicted as %s", record.shot_id, len(rects), target.value)
    return out


def subject_anchor(model, frame) -> Rect:
    """1x1 anchor at the centroid of the scale generator's subject map; the
    frame centre when the model has no generator or the map is empty."""
    h, w = frame.shape[:2]
    fallback = (w // 2, h // 2, 1, 1)
    key = model.generator_key(Task.SCALE) if Task.SCALE in model.tasks else None
    if key is None:
        return fallback
    gen = model.generators[key]
    s = model.cfg.input_size
    x = cv2.resize(frame, (s, s), interpolation=cv2.INTER_AREA).astype(np.float32) / 255.0
    gen.eval()
    with torch.no_grad():
        m = gen(torch.from_numpy(x.transpose(2, 0, 1))[None])[0, 0].numpy()
    total = float(m.sum())
    if total <= 1e-6:
        return fallback
    yy, xx = np.mgrid[0:s, 0:s]
    cx = (float((m * xx).sum()) / total + 0.5) * w / s
    cy = (float((m * yy).sum()) / total + 0.5) * h / s
    return (int(np.clip(cx, 0, w - 1)), int(np.clip(cy, 0, h - 1)), 1, 1)


@dataclass
class EditSegment:
    frame_start: int
    frame_end: int
    candidate: CropCandidate

    def to_dict(self):
        return {"frame_start": self.frame_start, "frame_end": self.frame_end,
                "candidate": self.candidate.to_dict()}


@dataclass
class EditPlan:
    source: str
    frame_start: int
    frame_end: int
    width: int
    height: int
    target_scale: ScaleType
    segments: List[EditSegment] = field(default_factory=list)
    fps: float = 24.0
    shot_id: str = ""
    output: Optional[str] = None

    def __post_init__(self):
        self.target_scale = ScaleType.parse(self.target_scale)

    def validate(self):
        spans = sorted((s.frame_start, s.frame_end) for s in self.segments)
        for a, b in spans:
            if not self.frame_start <= a < b <= self.frame_end:
                raise PlanError(f"segment [{a}, {b}) outside shot [{self.frame_start}, {self.frame_end})")
        for (_, b0), (a1, _) in zip(spans, spans[1:]):
            if a1 < b0:
                raise PlanError("segments overlap")
        for s in self.segments:
            _check_rect(s.candidate.rect, self.width, self.height)
            if s.candidate.predicted_scale is not self.target_scale:
                raise PlanError(f"segment [{s.frame_start}, {s.frame_end}) uses a "
                                f"{s.candidate.predicted_scale.value} crop, target is {self.target_scale.value}")
        return self

    def to_dict(self):
        return {"source": self.source, "frame_start": self.frame_start, "frame_end": self.frame_end,
                "width": self.width, "height": self.height, "fps": self.fps,
                "shot_id": self.shot_id, "output": self.output,
                "target_scale": self.target_scale.value,
                "segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, d):
        segs = [EditSegment(int(s["frame_start"]), int(s["frame_end"]), CropCandidate.from_dict(s["candidate"]))
                for s in d.get("segments", [])]
        return cls(d["source"], int(d["frame_start"]), int(d["frame_end"]), int(d["width"]),
                   int(d["height"]), d["target_scale"], segs, float(d.get("fps", 24.0)),
                   d.get("shot_id", ""), d.get("output"))


def identity_plan(source, frame_start, frame_end, width, height, target_scale, fps=24.0):
    """One full-frame segment: rendering it reproduces the source."""
    cand = CropCandidate((0, 0, width, height), ScaleType.parse(target_scale), 1.0)
    return EditPlan(str(source), frame_start, frame_end, width, height, target_scale,
                    [EditSegment(frame_start, frame_end, cand)], fps)


def sidecar_path(output):
    output = Path(output)
    return output.with_name(output.stem + ".plan.json")


def render_edit(plan: EditPlan, output, raw=None):
    """Write the edited shot (FFV1) and a JSON sidecar holding the plan.

    Frames inside a segment are replaced by the upscaled crop; the rest pass
    through. The plan is validated before anything is written.
    """
    plan.validate()
    if raw is None:
        raw = read_video(plan.source, plan.frame_start, plan.frame_end)
    if raw.shape[1:3] != (plan.height, plan.width):
        raise PlanError(f"source is {raw.shape[2]}x{raw.shape[1]}, plan says {plan.width}x{plan.height}")
    out = raw.copy()
    for seg in plan.segments:
        x, y, w, h = seg.candidate.rect
        if (x, y, w, h) == (0, 0, plan.width, plan.height):
            continue
        for idx in range(seg.frame_start, seg.frame_end):
            t = idx - plan.frame_start
            out[t] = cv2.resize(np.ascontiguousarray(raw[t, y:y + h, x:x + w]), (plan.width, plan.height),
                                interpolation=cv2.INTER_CUBIC)
    output = write_video(output, out, fps=plan.fps)
    plan.output = str(output)
    sidecar_path(output).write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True))
    return output


def parse_segments(text, frame_start, frame_end) -> List[Tuple[int, int]]:
    """'a:b,c:d' -> [(a, b), (c, d)]; an empty string means the whole shot."""
    if not text:
        return [(frame_start, frame_end)]
    spans = []
    for part in text.split(","):
        try:
            a, b = (int(v) for v in part.split(":"))
        except ValueError:
            raise PlanError(f"bad segment {part!r}; expected start:end") from None
        spans.append((a, b))
    return spans


def plan_edit(record: ShotRecord, media_path, model, target_scale, segments: Sequence[Tuple[int, int]],
              k=100, seed=0, anchor: Optional[Rect] = None, n_clips=8):
    """Pick the best ``target_scale`` crop per segment.

    Returns (plan, ranked) where ``ranked`` maps each segment to its candidate
    list. Segments with no matching crop are left out of the plan.
    """
    raw = read_video(media_path, record.frame_start, record.frame_end)
    height, width = raw.shape[1:3]
    plan = EditPlan(str(media_path), record.frame_start, record.frame_end, width, height, target_scale,
                    fps=record.fps, shot_id=record.shot_id)
    ranked = {}
    for a, b in segments:
        sub = replace(record, frame_start=a, frame_end=b, extra=dict(record.extra))
        seg_raw = raw[a - record.frame_start:b - record.frame_start]
        if seg_raw.shape[0] != b - a:
            raise PlanError(f"segment [{a}, {b}) outside shot [{record.frame_start}, {record.frame_end})")
        anc = anchor if anchor is not None else subject_anchor(model, seg_raw[len(seg_raw) // 2])
        rects = propose_crops((width, height), anc, k=k, seed=seed)
        cands = rank_candidates(sub, seg_raw, rects, model, target_scale, n_clips=n_clips)
        ranked[(a, b)] = cands
        if cands:
            plan.segments.append(EditSegment(a, b, cands[0]))
    plan.validate()
    return plan, ranked, raw
