"""Label taxonomy, shot records and the JSON-lines dataset manifest."""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Union


class ScaleType(Enum):
    LS = "LS"
    FS = "FS"
    MS = "MS"
    CS = "CS"
    ECS = "ECS"

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        try:
            return cls(str(text).upper())
        except ValueError:
            raise ValueError(f"unknown scale label {text!r}") from None

    @property
    def index(self):
        return SCALE_CLASSES.index(self)


class MovementType(Enum):
    STATIC = "static"
    MOTION = "motion"
    PUSH = "push"
    PULL = "pull"

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        try:
            return cls(str(text).lower())
        except ValueError:
            raise ValueError(f"unknown movement label {text!r}") from None

    @property
    def index(self):
        return MOVEMENT_CLASSES.index(self)


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    # inference-only pseudo split; the only place unlabeled records may appear
    PREDICT = "predict"

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        try:
            return cls(str(text).lower())
        except ValueError:
            raise ValueError(f"unknown split {text!r}") from None


SCALE_CLASSES = list(ScaleType)
MOVEMENT_CLASSES = list(MovementType)

_KNOWN_KEYS = ("shot_id", "media_uri", "frame_start", "frame_end", "fps",
               "scale", "movement", "split")
HEADER_KEY = "_header"


class ManifestError(ValueError):
    """Raised for malformed manifest content; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class ShotRecord:
    shot_id: str
    media_uri: str
    frame_start: int
    frame_end: int
    fps: float
    scale_label: Optional[ScaleType] = None
    movement_label: Optional[MovementType] = None
    split: Split = Split.TRAIN
    extra: Dict[str, object] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.shot_id:
            raise ValueError("shot_id must be non-empty")
        if self.frame_start < 0:
            raise ValueError(f"{self.shot_id}: frame_start must be >= 0")
        if self.frame_end <= self.frame_start:
            raise ValueError(
                f"{self.shot_id}: invalid frame span [{self.frame_start}, {self.frame_end})")
        if not self.fps > 0:
            raise ValueError(f"{self.shot_id}: fps must be positive")
        labeled = self.scale_label is not None and self.movement_label is not None
        if self.split is not Split.PREDICT and not labeled:
            raise ValueError(
                f"{self.shot_id}: records in split {self.split.value!r} need both labels")

    @property
    def n_frames(self):
        return self.frame_end - self.frame_start

    def to_dict(self):
        out = dict(self.extra)
        out.update({
            "shot_id": self.shot_id,
            "media_uri": self.media_uri,
            "frame_start": self.frame_start,
            "frame_end": self.frame_end,
            "fps": self.fps,
            "scale": self.scale_label.value if self.scale_label else None,
            "movement": self.movement_label.value if self.movement_label else None,
            "split": self.split.value,
        })
        return out

    @classmethod
    def from_dict(cls, obj):
        missing = [k for k in ("shot_id", "media_uri", "frame_start", "frame_end", "split")
                   if k not in obj]
        if missing:
            raise ValueError(f"missing field(s): {', '.join(missing)}")
        scale = obj.get("scale")
        movement = obj.get("movement")
        frame_start, frame_end = obj["frame_start"], obj["frame_end"]
        for name, value in (("frame_start", frame_start), ("frame_end", frame_end)):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(f"{name} must be an integer, got {value!r}")
        return cls(
            shot_id=str(obj["shot_id"]),
            media_uri=str(obj["media_uri"]),
            frame_start=frame_start,
            frame_end=frame_end,
            fps=float(obj.get("fps", 25.0)),
            scale_label=ScaleType.parse(scale) if scale is not None else None,
            movement_label=MovementType.parse(movement) if movement is not None else None,
            split=Split.parse(obj["split"]),
            extra={k: v for k, v in obj.items() if k not in _KNOWN_KEYS},
        )


@dataclass(frozen=True)
class Manifest:
    records: tuple = ()
    header: Optional[dict] = None
    # media_uri values are resolved relative to this directory
    root: Optional[Path] = None

    @property
    def counts(self):
        out = {s: 0 for s in Split}
        for r in self.records:
            out[r.split] += 1
        return out

    def __len__(self):
        return len(self.records)

    def by_id(self, shot_id):
        for r in self.records:
            if r.shot_id == shot_id:
                return r
        raise KeyError(shot_id)

    def resolve(self, record):
        path = Path(record.media_uri)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path


def split_view(manifest: Manifest, split: Union[Split, str]) -> List[ShotRecord]:
    split = Split.parse(split)
    return [r for r in manifest.records if r.split is split]


def _check_header(header, counts, line):
    expected = header.get("counts")
    if not expected:
        return
    for key, value in expected.items():
        split = Split.parse(key)
        if counts[split] != int(value):
            raise ManifestError(
                f"header declares {value} {split.value} records, found {counts[split]}", line)


def parse_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    header, header_line = None, None
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text:
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise ManifestError("record must be a JSON object", lineno)
            if HEADER_KEY in obj:
                if records or header is not None:
                    raise ManifestError("header must be the first record", lineno)
                header, header_line = dict(obj[HEADER_KEY]), lineno
                continue
            try:
                record = ShotRecord.from_dict(obj)
            except (ValueError, TypeError) as exc:
                raise ManifestError(str(exc), lineno) from None
            if record.shot_id in seen:
                raise ManifestError(
                    f"duplicate shot_id {record.shot_id!r} (first seen on line {seen[record.shot_id]})",
                    lineno)
            seen[record.shot_id] = lineno
            records.append(record)
    manifest = Manifest(tuple(records), header, path.parent)
    if header is not None:
        _check_header(header, manifest.counts, header_line)
    return manifest


def serialize_manifest(manifest: Manifest, path, with_header=False):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        header = manifest.header
        if with_header and header is None:
            header = {"counts": {s.value: n for s, n in manifest.counts.items() if n}}
        if header is not None:
            fh.write(json.dumps({HEADER_KEY: header}) + "\n")
        for r in manifest.records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def make_manifest(records, root=None, header=None):
    ids = set()
    for r in records:
        if r.shot_id in ids:
            raise ManifestError(f"duplicate shot_id {r.shot_id!r}")
        ids.add(r.shot_id)
    return Manifest(tuple(records), header, Path(root) if root is not None else None)
