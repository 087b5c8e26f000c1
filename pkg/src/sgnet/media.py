"""Shot decoding, clip segmentation, optical flow and clip-stack assembly.

Frames handed to the networks are float32 arrays laid out CHW with values in
[0, 1]; per-channel mean/std normalisation happens inside the models so that
subject/background masking operates on raw intensities.
"""

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional

import cv2
import numpy as np

from .data import ShotRecord

log = logging.getLogger(__name__)

FLO2_MAGIC = b"FLO2"
EPS_FLOW = 0.1


class SampleMode(Enum):
    TRAIN_RANDOM = "train_random"
    TEST_UNIFORM = "test_uniform"


class MediaError(RuntimeError):
    pass


class FrameIndexError(IndexError):
    pass


class DimensionMismatch(ValueError):
    pass


def resize_target(input_size):
    # 256 -> 224 ratio of the usual ImageNet recipe
    return int(round(input_size * 256 / 224))


@dataclass
class SamplingConfig:
    n_clips: int = 3
    mode: SampleMode = SampleMode.TRAIN_RANDOM
    input_size: int = 224
    frames_per_clip_rgb: int = 1
    frames_per_clip_flow: int = 5
    use_flow: bool = True
    augment: bool = True
    # displacements are divided by this and clipped to [-1, 1] before the network
    flow_bound: float = 20.0

    def with_(self, **kw):
        d = dict(self.__dict__)
        d.update(kw)
        return SamplingConfig(**d)


def segment_clips(record: ShotRecord, n_clips: int, mode=SampleMode.TEST_UNIFORM, seed: int = 0):
    """One absolute frame index per clip.

    The shot is cut into ``n_clips`` contiguous near-equal segments. Segments
    that come out empty (shot shorter than ``n_clips``) are clamped to a single
    frame, so indices repeat but the output always has ``n_clips`` entries.
    """
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    mode = SampleMode(mode)
    n = record.n_frames
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_clips):
        lo = min(k * n // n_clips, n - 1)
        hi = max(lo + 1, (k + 1) * n // n_clips)
        if mode is SampleMode.TEST_UNIFORM:
            off = (lo + hi - 1) // 2
        else:
            off = int(rng.integers(lo, hi))
        out.append(record.frame_start + off)
    return out


def segment_bounds(n_frames, n_clips):
    return [(k * n_frames // n_clips, (k + 1) * n_frames // n_clips) for k in range(n_clips)]


# ---------------------------------------------------------------- decoding

def read_video(path, start=0, end=None):
    """Decode frames [start, end) of a video as uint8 RGB, shape (T, H, W, 3)."""
    path = Path(path)
    if not path.exists():
        raise MediaError(f"media not found: {path}")
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise MediaError(f"cannot open media: {path}")
    try:
        if start:
            cap.set(cv2.CAP_PROP_POS_FRAMES, start)
        frames = []
        i = start
        while end is None or i < end:
            ok, frame = cap.read()
            if not ok:
                break
            frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
            i += 1
    finally:
        cap.release()
    if not frames:
        raise MediaError(f"no frames decoded from {path} at [{start}, {end})")
    if end is not None and len(frames) < end - start:
        raise MediaError(f"{path}: expected {end - start} frames from {start}, decoded {len(frames)}")
    return np.stack(frames)


def write_video(path, frames, fps=24.0):
    """Write uint8 RGB frames losslessly (FFV1)."""
    frames = np.asarray(frames)
    h, w = frames.shape[1:3]
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"FFV1"), float(fps), (w, h))
    if not writer.isOpened():
        raise MediaError(f"cannot open encoder for {path}")
    try:
        for f in frames:
            writer.write(cv2.cvtColor(np.ascontiguousarray(f), cv2.COLOR_RGB2BGR))
    finally:
        writer.release()
    return Path(path)


def resize_shorter(img, target, interp=cv2.INTER_AREA):
    h, w = img.shape[:2]
    if min(h, w) == target:
        return img
    s = target / min(h, w)
    size = (max(target, int(round(w * s))), max(target, int(round(h * s))))
    return cv2.resize(img, size, interpolation=interp)


@dataclass(frozen=True)
class CropParams:
    y: int
    x: int
    size: int
    flip: bool = False


def choose_crop(h, w, size, mode, rng=None, augment=True):
    if h == size and w == size:
        return CropParams(0, 0, size)
    if mode is SampleMode.TRAIN_RANDOM and augment:
        rng = rng if rng is not None else np.random.default_rng()
        return CropParams(int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)),
                          size, bool(rng.integers(0, 2)))
    return CropParams((h - size) // 2, (w - size) // 2, size)


def apply_crop(arr, crop):
    """Crop an HW[C] array; flips horizontally if requested."""
    out = arr[crop.y:crop.y + crop.size, crop.x:crop.x + crop.size]
    if crop.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def to_chw(img):
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def preprocess_frame(img, input_size, mode=SampleMode.TEST_UNIFORM, rng=None, augment=True):
    """uint8 HWC (or float CHW already at size) -> float32 CHW at input_size."""
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[1:] == (input_size, input_size) \
            and img.dtype != np.uint8:
        return img.astype(np.float32, copy=False)
    img = resize_shorter(img, resize_target(input_size)) if min(img.shape[:2]) != input_size else img
    crop = choose_crop(img.shape[0], img.shape[1], input_size, SampleMode(mode), rng, augment)
    return to_chw(apply_crop(img, crop))


# ----------------------------------------------------------------- flow

class FarnebackFlow:
    """Classical dense flow (Farneback polynomial expansion) via OpenCV."""

    def __init__(self, levels=3, winsize=9, iterations=3, poly_n=5, poly_sigma=1.1):
        self.params = dict(pyr_scale=0.5, levels=levels, winsize=winsize,
                           iterations=iterations, poly_n=poly_n, poly_sigma=poly_sigma, flags=0)

    def __call__(self, prev, nxt):
        a, b = _gray_u8(prev), _gray_u8(nxt)
        if np.array_equal(a, b):
            return np.zeros((2,) + a.shape, np.float32)
        flow = cv2.calcOpticalFlowFarneback(a, b, None, **self.params)
        return np.ascontiguousarray(flow.transpose(2, 0, 1), dtype=np.float32)


class ZeroFlow:
    def __call__(self, prev, nxt):
        return np.zeros((2,) + prev.shape[-2:], np.float32)


def _gray_u8(frame):
    frame = np.asarray(frame)
    if frame.ndim == 3 and frame.shape[0] == 3:
        frame = frame.transpose(1, 2, 0)
    if frame.dtype != np.uint8:
        frame = np.clip(frame * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if frame.ndim == 3:
        frame = cv2.cvtColor(np.ascontiguousarray(frame), cv2.COLOR_RGB2GRAY)
    return frame


DEFAULT_FLOW = FarnebackFlow()


def compute_flow(prev, nxt, estimator=None):
    """Dense displacement (dx, dy) from ``prev`` to ``nxt``; shape (2, H, W)."""
    prev, nxt = np.asarray(prev), np.asarray(nxt)
    if prev.shape != nxt.shape:
        raise DimensionMismatch(f"frame shapes differ: {prev.shape} vs {nxt.shape}")
    flow = (estimator or DEFAULT_FLOW)(prev, nxt)
    if not np.all(np.isfinite(flow)):
        raise MediaError("flow estimator returned non-finite values")
    return flow


def write_flo2(path, flow):
    """Little-endian: 4-byte magic, uint32 H, uint32 W, float32 dx plane, float32 dy plane."""
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError("flow must have shape (2, H, W)")
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLO2_MAGIC + struct.pack("<II", h, w))
        fh.write(flow.tobytes(order="C"))
    return Path(path)


def read_flo2(path):
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12 or head[:4] != FLO2_MAGIC:
            raise MediaError(f"{path}: not a FLO2 file")
        h, w = struct.unpack("<II", head[4:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != 2 * h * w:
        raise MediaError(f"{path}: truncated payload ({data.size} of {2 * h * w} floats)")
    return data.reshape(2, h, w).astype(np.float32)


class FlowFileLoader:
    """Precomputed flow: ``<shot_id>_<frame_idx>.flo2`` holds flow from frame_idx to frame_idx+1."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def load(self, shot_id, frame_idx):
        path = self.directory / f"{shot_id}_{frame_idx}.flo2"
        if not path.exists():
            raise MediaError(f"missing flow file {path}")
        return read_flo2(path)


def resize_flow(flow, h, w):
    _, fh, fw = flow.shape
    if (fh, fw) == (h, w):
        return flow
    dx = cv2.resize(flow[0], (w, h), interpolation=cv2.INTER_LINEAR) * (w / fw)
    dy = cv2.resize(flow[1], (w, h), interpolation=cv2.INTER_LINEAR) * (h / fh)
    return np.stack([dx, dy]).astype(np.float32)


# ------------------------------------------------------------ shot source

class ShotSource:
    """All frames of one shot resized (shorter side) for sampling, with lazily
    computed flow fields and subject maps at the same resolution."""

    def __init__(self, record, frames, estimator=None, flow_loader=None, teacher=None):
        self.record = record
        self.frames = frames  # uint8 (T, h, w, 3)
        self.estimator = estimator
        self.flow_loader = flow_loader
        self.teacher = teacher
        self._flow = {}
        self._maps = {}

    @property
    def shape(self):
        return tuple(self.frames[0].shape[:2])

    def frame(self, idx):
        t = idx - self.record.frame_start
        if not 0 <= t < len(self.frames):
            raise FrameIndexError(
                f"{self.record.shot_id}: frame {idx} outside [{self.record.frame_start}, "
                f"{self.record.frame_end})")
        return self.frames[t]

    def flow(self, idx):
        """Flow from frame idx to idx+1 (zero at the last frame / 1-frame shots)."""
        t = idx - self.record.frame_start
        if t not in self._flow:
            h, w = self.shape
            if t + 1 >= len(self.frames):
                f = np.zeros((2, h, w), np.float32)
            elif self.flow_loader is not None:
                f = resize_flow(self.flow_loader.load(self.record.shot_id, idx), h, w)
            else:
                f = compute_flow(self.frames[t], self.frames[t + 1], self.estimator)
            self._flow[t] = f.astype(np.float16)
        return self._flow[t].astype(np.float32)

    def subject_map(self, idx):
        if self.teacher is None:
            return None
        t = idx - self.record.frame_start
        if t not in self._maps:
            self._maps[t] = self.teacher(self, idx).astype(np.float32)
        return self._maps[t]


class SourceCache:
    """Bounded LRU of decoded shots keyed by shot id."""

    def __init__(self, root=None, input_size=224, estimator=None, flow_dir=None,
                 teacher=None, maxsize=4096):
        self.root = Path(root) if root is not None else None
        self.input_size = input_size
        self.estimator = estimator
        self.flow_loader = FlowFileLoader(flow_dir) if flow_dir else None
        self.teacher = teacher
        self.maxsize = maxsize
        self._items = OrderedDict()

    def media_path(self, record):
        p = Path(record.media_uri)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def get(self, record) -> ShotSource:
        key = (record.shot_id, record.media_uri, record.frame_start, record.frame_end)
        if key in self._items:
            self._items.move_to_end(key)
            return self._items[key]
        raw = read_video(self.media_path(record), record.frame_start, record.frame_end)
        target = resize_target(self.input_size)
        if raw.shape[1] == raw.shape[2] == self.input_size:
            frames = raw
        else:
            frames = np.stack([resize_shorter(f, target) for f in raw])
        src = ShotSource(record, frames, self.estimator, self.flow_loader, self.teacher)
        self._items[key] = src
        while len(self._items) > self.maxsize:
            self._items.popitem(last=False)
        return src


def decode_frames(record: ShotRecord, indices: List[int], input_size=224, root=None,
                  mode=SampleMode.TEST_UNIFORM, seed=0, cache: Optional[SourceCache] = None):
    """Decode and preprocess the given absolute frame indices of a shot."""
    for idx in indices:
        if not record.frame_start <= idx < record.frame_end:
            raise FrameIndexError(
                f"{record.shot_id}: frame {idx} outside [{record.frame_start}, {record.frame_end})")
    cache = cache or SourceCache(root, input_size)
    src = cache.get(record)
    rng = np.random.default_rng(seed)
    h, w = src.shape
    crop = choose_crop(h, w, input_size, SampleMode(mode), rng)
    return [to_chw(apply_crop(src.frame(i), crop)) for i in indices]


# -------------------------------------------------------------- clip stacks

@dataclass
class ClipStack:
    shot_id: str
    n_clips: int
    rgb: np.ndarray  # (N, F_rgb, 3, S, S)
    flow: Optional[np.ndarray]  # (N, F_flow, 2, S, S) scaled to [-1, 1], or None
    indices: List[int]
    sampling_seed: int
    # subject map (teacher / oracle) for each clip's first RGB frame, (N, 1, S, S)
    teacher: Optional[np.ndarray] = None
    crop: Optional[CropParams] = field(default=None, repr=False)

    def __post_init__(self):
        if self.rgb.shape[0] != self.n_clips or len(self.indices) != self.n_clips:
            raise ValueError("clip count mismatch in ClipStack")
        if self.flow is not None and self.flow.shape[0] != self.n_clips:
            raise ValueError("flow clip count mismatch in ClipStack")
        self.rgb.setflags(write=False)
        if self.flow is not None:
            self.flow.setflags(write=False)


def build_clip_stack(record: ShotRecord, config: SamplingConfig, seed: int = 0,
                     cache: Optional[SourceCache] = None, source: Optional[ShotSource] = None):
    if source is None:
        cache = cache or SourceCache(input_size=config.input_size)
        source = cache.get(record)
    rng = np.random.default_rng(seed)
    indices = segment_clips(record, config.n_clips, config.mode, int(rng.integers(2 ** 31)))
    h, w = source.shape
    crop = choose_crop(h, w, config.input_size, config.mode, rng, config.augment)
    last = record.frame_end - 1

    rgb, flow, maps = [], [], []
    for idx in indices:
        rgb.append([to_chw(apply_crop(source.frame(min(idx + k, last)), crop))
                    for k in range(config.frames_per_clip_rgb)])
        if config.use_flow:
            fields = []
            for k in range(config.frames_per_clip_flow):
                f = source.flow(min(idx + k, last))
                f = np.stack([apply_crop(f[0], crop), apply_crop(f[1], crop)])
                if crop.flip:
                    f[0] = -f[0]
                fields.append(np.clip(f / config.flow_bound, -1.0, 1.0))
            flow.append(fields)
        m = source.subject_map(idx)
        if m is not None:
            maps.append(apply_crop(m, crop)[None])
    return ClipStack(
        shot_id=record.shot_id,
        n_clips=config.n_clips,
        rgb=np.asarray(rgb, np.float32),
        flow=np.asarray(flow, np.float32) if config.use_flow else None,
        indices=indices,
        sampling_seed=seed,
        teacher=np.asarray(maps, np.float32) if maps else None,
        crop=crop,
    )
