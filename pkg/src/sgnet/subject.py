"""Subject maps: a small student generator distilled from teacher saliency maps
with an L2 term, a least-squares adversarial term and the classification loss."""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)


class MapSource(Enum):
    STUDENT = "student"
    TEACHER = "teacher"
    ORACLE = "oracle"


@dataclass
class SubjectMap:
    mask: np.ndarray  # (H, W) float32 in [0, 1]
    source: MapSource

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.mask.ndim != 2:
            raise ValueError(f"subject map must be 2-D, got shape {self.mask.shape}")


@dataclass
class KDLossWeights:
    alpha: float = 1.0
    beta: float = 0.05

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _conv(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class StudentGenerator(nn.Module):
    """Six conv layers: three stride-2 (16/32/64 channels), two stride-1, one
    1x1 projection; bilinear upsampling back to input size and a sigmoid."""

    def __init__(self, in_channels=3):
        super().__init__()
        self.features = nn.Sequential(
            _conv(in_channels, 16, 2),
            _conv(16, 32, 2),
            _conv(32, 64, 2),
            _conv(64, 32, 1),
            _conv(32, 32, 1),
        )
        self.project = nn.Conv2d(32, 1, 1)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    @property
    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())

    def forward(self, x):
        h, w = x.shape[-2:]
        y = self.project(self.features((x - self.mean) / self.std))
        y = F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)
        return torch.sigmoid(y)


class Discriminator(nn.Module):
    """Four strided convs over [map, frame] -> one real/fake score per map."""

    def __init__(self, frame_channels=3, width=16):
        super().__init__()
        self.frame_channels = frame_channels
        c = width
        self.net = nn.Sequential(
            nn.Conv2d(1 + frame_channels, c, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * c, 1, 3, 1, 1),
        )

    def forward(self, mask, frame=None):
        if mask.dim() == 3:
            mask = mask.unsqueeze(1)
        if self.frame_channels:
            if frame is None:
                frame = torch.zeros(mask.shape[0], self.frame_channels, *mask.shape[-2:],
                                    dtype=mask.dtype, device=mask.device)
            mask = torch.cat([mask, frame], dim=1)
        return self.net(mask).mean(dim=(1, 2, 3))


def _as_tensor(m):
    if isinstance(m, SubjectMap):
        return torch.from_numpy(m.mask)
    if isinstance(m, np.ndarray):
        return torch.from_numpy(m)
    return m


def student_forward(gen: StudentGenerator, frame) -> SubjectMap:
    """Run the generator on one CHW frame in eval mode."""
    x = _as_tensor(np.asarray(frame, np.float32) if not torch.is_tensor(frame) else frame)
    if x.dim() != 3 or x.shape[0] != gen.features[0][0].in_channels:
        raise ValueError(f"expected a ({gen.features[0][0].in_channels}, H, W) frame, got {tuple(x.shape)}")
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        out = gen(x.unsqueeze(0).float())[0, 0]
    gen.train(was_training)
    return SubjectMap(out.numpy(), MapSource.STUDENT)


def kd_l2_loss(student, teacher):
    """Mean squared difference between two subject maps (tensors or SubjectMaps)."""
    s, t = _as_tensor(student), _as_tensor(teacher)
    if s.shape != t.shape:
        raise ValueError(f"map shapes differ: {tuple(s.shape)} vs {tuple(t.shape)}")
    return ((s - t) ** 2).mean()


def lsgan_losses(d_real, d_fake_detached, d_fake):
    """Least-squares GAN objectives from discriminator scores.

    ``d_fake_detached`` is D evaluated on a detached fake (drives the
    discriminator); ``d_fake`` keeps the generator graph (drives the generator).
    """
    disc = 0.5 * (((d_real - 1) ** 2).mean() + (d_fake_detached ** 2).mean())
    gen = 0.5 * ((d_fake - 1) ** 2).mean()
    return disc, gen


def adversarial_losses(disc: Discriminator, real, fake, frame=None):
    """Returns (disc_loss, gen_loss); fake reaches the generator only via gen_loss."""
    real, fake = _as_tensor(real), _as_tensor(fake)
    if real.dim() == 2:
        real, fake = real[None, None], fake[None, None]
        if frame is not None:
            frame = _as_tensor(frame)[None]
    d_real = disc(real, frame)
    d_fake_det = disc(fake.detach(), frame)
    d_fake = disc(fake, frame)
    return lsgan_losses(d_real, d_fake_det, d_fake)


def kd_total_loss(l2, adv, cls, w: KDLossWeights):
    return w.alpha * l2 + w.beta * adv + cls


# ------------------------------------------------------------- teachers

def oracle_teacher(frame, sigma_frac=0.35, blur_frac=0.05) -> SubjectMap:
    """Center-weighted colour contrast; a deterministic stand-in for a trained
    saliency teacher, only meant for tests and demos."""
    x = np.asarray(frame, np.float32)
    if x.ndim == 3 and x.shape[0] in (1, 3):
        x = x.transpose(1, 2, 0)
    if x.ndim == 2:
        x = x[..., None]
    h, w = x.shape[:2]
    contrast = np.sqrt(((x - x.reshape(-1, x.shape[2]).mean(0)) ** 2).sum(-1))
    k = max(3, int(round(blur_frac * max(h, w))) | 1)
    contrast = cv2.GaussianBlur(contrast, (k, k), 0)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    sy, sx = sigma_frac * h, sigma_frac * w
    prior = np.exp(-0.5 * (((yy - (h - 1) / 2) / sy) ** 2 + ((xx - (w - 1) / 2) / sx) ** 2))
    sal = contrast * (0.5 + 0.5 * prior)
    peak = sal.max()
    if peak <= 1e-6:
        return SubjectMap(np.zeros((h, w), np.float32), MapSource.ORACLE)
    return SubjectMap(np.clip(sal / peak, 0.0, 1.0), MapSource.ORACLE)


class TeacherMapError(FileNotFoundError):
    pass


clamp_events = {"count": 0}


def teacher_map_path(directory, shot_id, frame_idx):
    return Path(directory) / f"{shot_id}_{frame_idx}.png"


def read_teacher_map(path):
    """8-bit grayscale PNG -> float map in [0, 1]. 16-bit and float images are
    accepted too; anything outside [0, 1] is clamped and counted."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise TeacherMapError(f"cannot read teacher map {path}")
    if img.ndim == 3:
        img = img[..., 0]
    if img.dtype == np.uint8:
        m = img.astype(np.float32) / 255.0
    elif img.dtype == np.uint16:
        m = img.astype(np.float32) / 65535.0
    else:
        m = img.astype(np.float32)
    return _clamp(m, path)


def _clamp(m, where):
    if m.min() < 0.0 or m.max() > 1.0:
        clamp_events["count"] += 1
        log.warning("teacher map %s has values outside [0, 1]; clamped", where)
        m = np.clip(m, 0.0, 1.0)
    return m


def load_teacher_maps(directory, shot_id, indices):
    out = []
    for idx in indices:
        path = teacher_map_path(directory, shot_id, idx)
        if not path.exists():
            raise TeacherMapError(f"missing teacher map for {shot_id} index {idx}: {path}")
        out.append(SubjectMap(read_teacher_map(path), MapSource.TEACHER))
    return out


def write_teacher_map(directory, shot_id, frame_idx, mask):
    path = teacher_map_path(directory, shot_id, frame_idx)
    m = np.clip(np.asarray(mask, np.float32), 0, 1)
    cv2.imwrite(str(path), (m * 255.0 + 0.5).astype(np.uint8))
    return path


class FileTeacher:
    """Teacher provider for the media pipeline: maps from ``<shot_id>_<idx>.png``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def __call__(self, source, idx):
        m = load_teacher_maps(self.directory, source.record.shot_id, [idx])[0].mask
        h, w = source.shape
        if m.shape != (h, w):
            m = cv2.resize(m, (w, h), interpolation=cv2.INTER_LINEAR)
        return np.clip(m, 0.0, 1.0)


class OracleTeacher:
    def __call__(self, source, idx):
        return oracle_teacher(source.frame(idx).astype(np.float32) / 255.0).mask


def make_teacher(kind, directory=None):
    if kind in (None, "none"):
        return None
    if kind == "oracle":
        return OracleTeacher()
    if kind == "files":
        if directory is None:
            raise ValueError("--teacher files needs a teacher map directory")
        return FileTeacher(directory)
    raise ValueError(f"unknown teacher kind {kind!r}")
