"""Deterministic synthetic shots for tests and desk-scale experiments.

Labeled shots render a coloured elliptical "subject" over a cluttered grey
world seen through a virtual camera. Scale is the subject's height relative
to the frame; movement is the camera path:

* static  - camera fixed, the subject sways slightly inside the frame
* motion  - camera pans; the subject is tracked and stays put in frame
* push    - camera zooms in around the frame centre
* pull    - camera zooms out

The exact subject mask of every frame is written as the teacher map.
"""

import json
from pathlib import Path

import cv2
import numpy as np

from .data import (MOVEMENT_CLASSES, SCALE_CLASSES, MovementType, ScaleType, ShotRecord, Split,
                   make_manifest, serialize_manifest)
from .media import write_video, write_flo2
from .subject import write_teacher_map

# subject height as a fraction of frame height, at zoom 1
SCALE_HEIGHT = {
    ScaleType.LS: 0.14,
    ScaleType.FS: 0.28,
    ScaleType.MS: 0.52,
    ScaleType.CS: 0.88,
    ScaleType.ECS: 1.5,
}
ZOOM_RANGE = 1.18


def _world(rng, size):
    """Grey clutter: smooth noise plus random rectangles and discs."""
    h = w = size
    base = cv2.resize(rng.uniform(60, 190, (h // 8, w // 8)).astype(np.float32), (w, h),
                      interpolation=cv2.INTER_CUBIC)
    img = base.copy()
    for _ in range(size * size // 220):
        cx, cy = rng.integers(0, w), rng.integers(0, h)
        r = int(rng.integers(2, max(3, size // 14)))
        val = float(rng.uniform(0, 255))
        if rng.random() < 0.5:
            cv2.rectangle(img, (int(cx - r), int(cy - r)), (int(cx + r), int(cy + r)), val, -1)
        else:
            cv2.circle(img, (int(cx), int(cy)), r, val, -1)
    img = np.clip(img, 0, 255)
    return np.repeat(img[..., None], 3, axis=2)


def _add_distractors(world, rng, size, n):
    """Saturated discs and boxes so colour alone does not find the subject."""
    h, w = world.shape[:2]
    for _ in range(n):
        cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
        r = int(rng.uniform(0.06, 0.3) * size)
        col = tuple(float(v) for v in _subject_color(rng))
        if rng.random() < 0.5:
            cv2.circle(world, (cx, cy), r, col, -1)
        else:
            a = rng.uniform(0.6, 1.6)
            cv2.rectangle(world, (int(cx - r * a), int(cy - r / a)), (int(cx + r * a), int(cy + r / a)), col, -1)
    return world


def _subject_color(rng):
    hue = int(rng.integers(0, 180))
    hsv = np.uint8([[[hue, 220, 230]]])
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0].astype(np.float32)


def _draw_subject(frame, cx, cy, height, color, rng_state):
    """Alpha-blend an elliptical subject; returns the soft mask."""
    h, w = frame.shape[:2]
    ss = 4  # supersampling for an anti-aliased mask
    mask = np.zeros((h * ss, w * ss), np.float32)
    ax, ay = 0.32 * height * ss, 0.5 * height * ss
    cv2.ellipse(mask, (int(cx * ss), int(cy * ss)), (max(1, int(ax)), max(1, int(ay))), 0, 0, 360, 1.0, -1)
    mask = cv2.resize(mask, (w, h), interpolation=cv2.INTER_AREA)
    # interior features that scale with the subject (eyes / mouth analogue)
    detail = np.zeros((h * ss, w * ss), np.float32)
    for dx, dy, r in rng_state:
        cv2.circle(detail, (int((cx + dx * height) * ss), int((cy + dy * height) * ss)),
                   max(1, int(r * height * ss)), 1.0, -1)
    detail = cv2.resize(detail, (w, h), interpolation=cv2.INTER_AREA) * mask
    col = color[None, None] * (1 - 0.6 * detail[..., None])
    frame[:] = frame * (1 - mask[..., None]) + col * mask[..., None]
    return mask


def render_shot(scale, movement, n_frames=24, size=64, seed=0, distractors=24):
    """Returns (frames uint8 (T, size, size, 3), masks float32 (T, size, size)).

    ``distractors`` coloured shapes are scattered over the (4x frame sized) world.
    """
    scale, movement = ScaleType(scale), MovementType(movement)
    rng = np.random.default_rng(seed)
    wsize = size * 4
    world = _world(rng, wsize)
    # own stream, so the rest of the shot does not depend on the distractor count
    _add_distractors(world, np.random.default_rng([seed, 1]), size, distractors)
    color = _subject_color(rng)
    details = [(-0.09, -0.18, 0.06), (0.09, -0.18, 0.06), (0.0, 0.1, 0.08)]
    height = SCALE_HEIGHT[scale] * size * float(rng.uniform(0.9, 1.1))

    cam0 = np.array([wsize / 2, wsize / 2]) + rng.uniform(-size / 4, size / 4, 2)
    sub_off = rng.uniform(-0.12, 0.12, 2) * size  # subject offset from frame centre
    T = n_frames
    u = np.linspace(-0.5, 0.5, T)
    if movement is MovementType.MOTION:
        speed = rng.uniform(1.2, 2.0) * size / 64
        ang = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.cos(ang), np.sin(ang)])
    else:
        vel = np.zeros(2)
    if movement is MovementType.STATIC:
        drift = rng.uniform(0.04, 0.08) * size
        dang = rng.uniform(0, 2 * np.pi)
        sub_vel = drift / max(T - 1, 1) * np.array([np.cos(dang), np.sin(dang)])
    else:
        sub_vel = np.zeros(2)
    if movement is MovementType.PUSH:
        zooms = ZOOM_RANGE ** (2 * u)
    elif movement is MovementType.PULL:
        zooms = ZOOM_RANGE ** (-2 * u)
    else:
        zooms = np.ones(T)

    frames, masks = [], []
    c = (size - 1) / 2
    for t in range(T):
        z = zooms[t]
        cam = cam0 + vel * (t - (T - 1) / 2)
        # frame pixel p -> world cam + (p - c) / z
        A = np.array([[1 / z, 0, cam[0] - c / z], [0, 1 / z, cam[1] - c / z]])
        frame = cv2.warpAffine(world, A, (size, size), flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                               borderMode=cv2.BORDER_REFLECT)
        frame = frame.astype(np.float32)
        pos = sub_off + sub_vel * (t - (T - 1) / 2)
        pos = np.array([c, c]) + pos * z
        mask = _draw_subject(frame, pos[0], pos[1], height * z, color, details)
        frames.append(np.clip(frame + 0.5, 0, 255).astype(np.uint8))
        masks.append(mask)
    return np.stack(frames), np.stack(masks)


def make_shot_dataset(out_dir, n_shots=40, seed=0, splits=(1.0, 0.0, 0.0), n_frames=24, size=64,
                      with_header=True, flow_files=False):
    """Write videos, teacher maps and ``manifest.jsonl``; returns the manifest path.

    Labels cycle through every (scale, movement) pair so classes stay balanced.
    ``splits`` are TRAIN/VAL/TEST fractions, assigned per label-cycle so each
    split is balanced too.
    """
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    (out / "teacher").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    combos = [(s, m) for s in SCALE_CLASSES for m in MOVEMENT_CLASSES]
    labels = []
    while len(labels) < n_shots:
        block = [combos[i] for i in rng.permutation(len(combos))]
        labels.extend(block)
    labels = labels[:n_shots]
    split_of = _spread_splits(n_shots, splits)

    records = []
    for i, (scale, movement) in enumerate(labels):
        shot_id = f"shot{i:04d}"
        frames, masks = render_shot(scale, movement, n_frames, size, seed=seed * 100003 + i)
        write_video(out / "videos" / f"{shot_id}.avi", frames, fps=24)
        for t, m in enumerate(masks):
            write_teacher_map(out / "teacher", shot_id, t, m)
        if flow_files:
            from .media import compute_flow
            (out / "flow").mkdir(exist_ok=True)
            for t in range(len(frames) - 1):
                write_flo2(out / "flow" / f"{shot_id}_{t}.flo2", compute_flow(frames[t], frames[t + 1]))
        records.append(ShotRecord(shot_id, f"videos/{shot_id}.avi", 0, n_frames, 24.0,
                                  scale, movement, split_of[i]))
    manifest = make_manifest(records, root=out)
    path = serialize_manifest(manifest, out / "manifest.jsonl", with_header=with_header)
    return path


def _spread_splits(n, fractions):
    """Assign TRAIN/VAL/TEST so that every prefix of the label sequence holds
    each split in (roughly) its target proportion."""
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    counts = {Split.TRAIN: n_train, Split.VAL: n_val, Split.TEST: n - n_train - n_val}
    taken = {s: 0 for s in counts}
    out = []
    for i in range(n):
        best = max((s for s in counts if taken[s] < counts[s]),
                   key=lambda s: (counts[s] * (i + 1) / n - taken[s], -list(counts).index(s)))
        taken[best] += 1
        out.append(best)
    return out


# ------------------------------------------------------- media fixtures

def periodic_texture(size=64, period=16, seed=0):
    rng = np.random.default_rng(seed)
    tile = rng.uniform(0, 255, (period, period)).astype(np.float32)
    tile = cv2.GaussianBlur(tile, (3, 3), 0)
    reps = int(np.ceil(size / period))
    img = np.tile(tile, (reps, reps))[:size, :size]
    return np.repeat(img[..., None], 3, axis=2).astype(np.uint8)


def fixture_frames(kind, n_frames=16, size=64, seed=0):
    """uint8 RGB frames for the simple media fixtures."""
    if kind == "solid":
        return np.full((n_frames, size, size, 3), 128, np.uint8)
    if kind == "numbered":
        # the frame number is encoded as the grey level (8 * index)
        return np.stack([np.full((size, size, 3), 8 * t, np.uint8) for t in range(n_frames)])
    if kind == "translate":
        tex = periodic_texture(size, seed=seed)
        return np.stack([np.roll(tex, 3 * t, axis=1) for t in range(n_frames)])
    if kind == "zoom":
        tex = periodic_texture(size * 2, seed=seed)
        out = []
        c = size - 0.5
        for t in range(n_frames):
            z = 1.0 + 0.04 * t
            A = np.array([[1 / z, 0, c - (size - 1) / 2 / z], [0, 1 / z, c - (size - 1) / 2 / z]])
            out.append(cv2.warpAffine(tex, A, (size, size), flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP))
        return np.stack(out)
    raise ValueError(f"unknown fixture kind {kind!r}")


def decode_marker(frame):
    """Inverse of the 'numbered' fixture encoding for a CHW [0,1] or HWC uint8 frame."""
    f = np.asarray(frame, np.float32)
    if f.max() <= 1.0 + 1e-6:
        f = f * 255.0
    return int(round(float(f.mean()) / 8.0))


def make_media_fixture(kind, path, n_frames=16, size=64, seed=0):
    return write_video(path, fixture_frames(kind, n_frames, size, seed))


def write_fixture_meta(path, **meta):
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
