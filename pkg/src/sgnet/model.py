"""Guided two-branch shot classifier.

A guidance branch (subject or background image / flow) runs in parallel with
the whole-image branch; after pool1, res2, res3 and res4 its feature map is
concatenated into the whole-image pathway and projected back to the nominal
width with a 1x1 conv. Clip features are average-pooled and classified. For
camera movement a variance map (pairwise cosine similarity of stage features
across clips) feeds a separate two-layer classifier whose scores are fused
with the clip classifier's.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SCALE_CLASSES, MOVEMENT_CLASSES
from .subject import StudentGenerator, Discriminator

log = logging.getLogger(__name__)

FUSION_STAGES = ("pool1", "res2", "res3", "res4")
ALL_STAGES = FUSION_STAGES + ("res5",)

# zero-norm stage features seen by variance_map
diagnostics = Counter()


class Task(Enum):
    SCALE = "scale"
    MOVEMENT = "movement"

    @property
    def n_classes(self):
        return len(SCALE_CLASSES) if self is Task.SCALE else len(MOVEMENT_CLASSES)

    @property
    def labels(self):
        return SCALE_CLASSES if self is Task.SCALE else MOVEMENT_CLASSES


class Stream(Enum):
    RGB = "rgb"
    FLOW = "flow"


VARMAP = "varmap"

GUIDANCE_MODES = ("none", "subject", "background", "both", "subject_only", "background_only")


@dataclass
class ModelConfig:
    backbone: str = "tiny"  # "tiny" (desk scale) or "resnet50"
    width: int = 16  # tiny backbone base width
    input_size: int = 224
    use_flow: bool = True
    frames_per_clip_flow: int = 5
    scale_guidance: str = "subject"
    movement_guidance: str = "background"
    use_variance_map: bool = True
    var_streams: Sequence[str] = ("rgb", "flow")
    n_clips_cls: int = 3
    n_clips_test: int = 25
    n_clips_var: int = 8
    var_hidden: int = 128
    var_norm: bool = True
    fusion_weights: Dict[str, float] = field(
        default_factory=lambda: {"rgb": 1.0, "flow": 1.0, "varmap": 1.0})
    pretrained: Optional[str] = None

    def __post_init__(self):
        for g in (self.scale_guidance, self.movement_guidance):
            if g not in GUIDANCE_MODES:
                raise ValueError(f"unknown guidance mode {g!r}; expected one of {GUIDANCE_MODES}")
        if self.backbone not in ("tiny", "resnet50"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        self.var_streams = tuple(self.var_streams)
        if self.n_clips_var < 2 and self.use_variance_map:
            raise ValueError("variance map needs n_clips_var >= 2")

    def guidance(self, task):
        return self.scale_guidance if Task(task) is Task.SCALE else self.movement_guidance

    @property
    def streams(self):
        return [Stream.RGB] + ([Stream.FLOW] if self.use_flow else [])

    def uses_map(self, task):
        return self.guidance(task) != "none"

    def to_dict(self):
        d = asdict(self)
        d["var_streams"] = list(self.var_streams)
        return d

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------- backbones

class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.down is None else self.down(x)))


def tiny_stages(in_channels, width):
    w = width
    stages = nn.ModuleDict({
        "pool1": nn.Sequential(
            nn.Conv2d(in_channels, w, 3, 1, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
            nn.MaxPool2d(2)),
        "res2": BasicBlock(w, w),
        "res3": BasicBlock(w, 2 * w, 2),
        "res4": BasicBlock(2 * w, 4 * w, 2),
        "res5": BasicBlock(4 * w, 8 * w, 2),
    })
    channels = {"pool1": w, "res2": w, "res3": 2 * w, "res4": 4 * w, "res5": 8 * w}
    return stages, channels


def resnet50_stages(in_channels):
    from torchvision.models import resnet50

    r = resnet50(weights=None)
    if in_channels != 3:
        r.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
    stages = nn.ModuleDict({
        "pool1": nn.Sequential(r.conv1, r.bn1, r.relu, r.maxpool),
        "res2": r.layer1,
        "res3": r.layer2,
        "res4": r.layer3,
        "res5": r.layer4,
    })
    channels = {"pool1": 64, "res2": 256, "res3": 512, "res4": 1024, "res5": 2048}
    return stages, channels


def build_stages(kind, in_channels, width):
    if kind == "tiny":
        return tiny_stages(in_channels, width)
    return resnet50_stages(in_channels)


def inflate_first_conv(weight, in_channels):
    """Adapt an RGB first-layer kernel to ``in_channels`` by channel-mean inflation."""
    if weight.shape[1] == in_channels:
        return weight
    return weight.mean(dim=1, keepdim=True).repeat(1, in_channels, 1, 1)


class GuidedBackbone(nn.Module):
    """Whole-image branch plus zero or more guidance branches fused after
    each of pool1/res2/res3/res4 (one-way, guidance -> whole image)."""

    def __init__(self, in_channels, n_guides=1, kind="tiny", width=16):
        super().__init__()
        self.n_guides = n_guides
        self.whole, self.channels = build_stages(kind, in_channels, width)
        self.guides = nn.ModuleList()
        for _ in range(n_guides):
            stages, _ = build_stages(kind, in_channels, width)
            del stages["res5"]
            self.guides.append(stages)
        self.fuse = nn.ModuleDict()
        if n_guides:
            for name in FUSION_STAGES:
                c = self.channels[name]
                proj = nn.Conv2d((1 + n_guides) * c, c, 1, bias=False)
                # start as pass-through of the whole-image pathway
                with torch.no_grad():
                    proj.weight.zero_()
                    proj.weight[:, :c, 0, 0].copy_(torch.eye(c))
                self.fuse[name] = proj

    @property
    def feature_dim(self):
        return self.channels["res5"]

    def stage_names(self):
        return {"whole": list(ALL_STAGES), "guide": list(FUSION_STAGES), "fusion": list(FUSION_STAGES)}

    def forward(self, whole, guidance=()):
        if len(guidance) != self.n_guides:
            raise ValueError(f"expected {self.n_guides} guidance input(s), got {len(guidance)}")
        for g in guidance:
            if g.shape != whole.shape:
                raise ValueError(f"guidance shape {tuple(g.shape)} != image shape {tuple(whole.shape)}")
        x = whole
        gs = list(guidance)
        stage_feats = []
        for name in FUSION_STAGES:
            x = self.whole[name](x)
            if self.n_guides:
                gs = [branch[name](g) for branch, g in zip(self.guides, gs)]
                x = self.fuse[name](torch.cat([x] + gs, dim=1))
            stage_feats.append(x)
        x = self.whole["res5"](x)
        feat = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return feat, stage_feats


def guided_forward(bb: GuidedBackbone, guidance, whole):
    """Single-clip convenience wrapper: returns (clip_feature, stage_features)."""
    guides = [] if guidance is None else (list(guidance) if isinstance(guidance, (list, tuple)) else [guidance])
    return bb(whole, guides)


# ----------------------------------------------------------------- guidance

def make_guidance_inputs(frame, subject_map, task):
    """(guidance_image, whole_image). Scale uses the subject image, movement the
    background image; the background is computed as frame minus subject."""
    task = Task(task)
    m = subject_map
    if m.dim() == frame.dim() - 1:
        m = m.unsqueeze(-3)
    if m.shape[-2:] != frame.shape[-2:]:
        raise ValueError(f"map size {tuple(m.shape[-2:])} != frame size {tuple(frame.shape[-2:])}")
    subject = m * frame
    if task is Task.SCALE:
        return subject, frame
    return frame - subject, frame


def guidance_images(frame, subject_map, mode):
    """Inputs for a backbone under a guidance mode: (whole_input, [guides])."""
    if mode == "none":
        return frame, []
    subject, _ = make_guidance_inputs(frame, subject_map, Task.SCALE)
    background = frame - subject
    if mode == "subject":
        return frame, [subject]
    if mode == "background":
        return frame, [background]
    if mode == "both":
        return frame, [subject, background]
    if mode == "subject_only":
        return subject, []
    if mode == "background_only":
        return background, []
    raise ValueError(f"unknown guidance mode {mode!r}")


def n_guides(mode):
    return {"subject": 1, "background": 1, "both": 2}.get(mode, 0)


# ------------------------------------------------------------ variance map

def variance_map(stage_features, batched=False, eps=1e-12):
    """Pairwise cosine similarity of clip features per stage.

    ``stage_features``: list of M tensors shaped (N, ...) for one shot, or
    (B, N, ...) with ``batched=True``. Returns (M, N, N) or (B, M, N, N). Each
    feature is flattened over all remaining axes before L2 normalisation.
    Zero-norm features get similarity 0 off the diagonal; the diagonal is 1.
    """
    maps = []
    for f in stage_features:
        if not batched:
            f = f.unsqueeze(0)
        b, n = f.shape[:2]
        if n < 2:
            raise ValueError("variance map needs at least 2 clips")
        flat = f.reshape(b, n, -1)
        norm = flat.norm(dim=-1, keepdim=True)
        zero = norm <= eps
        if bool(zero.any()):
            diagnostics["zero_norm"] += int(zero.sum())
            log.debug("variance_map: %d zero-norm clip feature(s)", int(zero.sum()))
        unit = torch.where(zero, torch.zeros_like(flat), flat / norm.clamp_min(eps))
        v = unit @ unit.transpose(1, 2)
        v = 0.5 * (v + v.transpose(1, 2))
        eye = torch.eye(n, dtype=v.dtype, device=v.device)
        v = v * (1 - eye) + eye
        maps.append(v.clamp(-1.0, 1.0))
    out = torch.stack(maps, dim=1)
    return out if batched else out[0]


class VarianceHead(nn.Module):
    """Flattened M x N x N variance map -> two fully connected layers.

    The flattened map is standardised per entry (batch norm) first: cosine
    similarities of dense non-negative features crowd near 1 and the raw
    spread is too small for the FC layers to pick up at small scale.
    """

    def __init__(self, n_stages, n_clips, n_classes, hidden=128, normalize=True):
        super().__init__()
        self.n_stages, self.n_clips = n_stages, n_clips
        d = n_stages * n_clips * n_clips
        self.norm = nn.BatchNorm1d(d) if normalize else nn.Identity()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, v):
        if v.shape[-3:] != (self.n_stages, self.n_clips, self.n_clips):
            raise ValueError(f"variance map shape {tuple(v.shape)} does not match "
                             f"({self.n_stages}, {self.n_clips}, {self.n_clips})")
        single = v.dim() == 3
        x = v.flatten(-3)
        x = x[None] if single else x
        if isinstance(self.norm, nn.BatchNorm1d) and self.training and x.shape[0] == 1:
            # batch statistics are undefined for one shot; fall back to the running estimates
            n = self.norm
            x = F.batch_norm(x, n.running_mean, n.running_var, n.weight, n.bias, False, 0.0, n.eps)
        else:
            x = self.norm(x)
        out = self.fc2(F.relu(self.fc1(x)))
        return out[0] if single else out


# ---------------------------------------------------------------- scores

@dataclass(frozen=True)
class ScoreVector:
    task: Task
    probs: np.ndarray
    provenance: frozenset = frozenset()

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.shape[0] != Task(self.task).n_classes:
            raise ValueError(f"{self.task}: expected {Task(self.task).n_classes} probabilities, got {p.shape}")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "provenance", frozenset(self.provenance))

    @property
    def label(self):
        return Task(self.task).labels[int(np.argmax(self.probs))]

    @property
    def confidence(self):
        return float(self.probs.max())


def softmax_scores(logits, task, provenance):
    p = torch.softmax(logits.detach().double(), dim=-1).cpu().numpy()
    p = p / p.sum(-1, keepdims=True)
    if p.ndim == 1:
        return ScoreVector(Task(task), p, provenance)
    return [ScoreVector(Task(task), row, provenance) for row in p]


def pool_and_classify(clip_features, fc, task, provenance=("rgb",)):
    """Average clip features, one FC layer, softmax."""
    if isinstance(clip_features, (list, tuple)):
        if not clip_features:
            raise ValueError("need at least one clip feature")
        clip_features = torch.stack(list(clip_features))
    logits = fc(clip_features.mean(dim=0))
    return softmax_scores(logits, task, provenance)


def fuse_scores(parts):
    """Weighted arithmetic mean of probability vectors, renormalised."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to fuse")
    task = parts[0][0].task
    n = len(parts[0][0].probs)
    acc = np.zeros(n)
    total = 0.0
    prov = set()
    for sv, w in parts:
        if sv.task is not task or len(sv.probs) != n:
            raise ValueError(f"cannot fuse {sv.task} scores with {task} scores")
        if not np.isfinite(w) or w <= 0:
            raise ValueError(f"fusion weight must be positive and finite, got {w}")
        acc += w * sv.probs
        total += w
        prov |= sv.provenance
    acc /= total
    return ScoreVector(task, acc / acc.sum(), frozenset(prov))


# ----------------------------------------------------------- stream model

class StreamNet(nn.Module):
    """One task on one input stream: guided backbone, clip classifier and
    (optionally) the variance-map classifier."""

    def __init__(self, task, stream, cfg: ModelConfig):
        super().__init__()
        self.task, self.stream = Task(task), Stream(stream)
        self.mode = cfg.guidance(self.task)
        in_ch = 3 if self.stream is Stream.RGB else 2 * cfg.frames_per_clip_flow
        self.in_channels = in_ch
        self.backbone = GuidedBackbone(in_ch, n_guides(self.mode), cfg.backbone, cfg.width)
        self.fc = nn.Linear(self.backbone.feature_dim, self.task.n_classes)
        self.var_head = None
        if (self.task is Task.MOVEMENT and cfg.use_variance_map
                and self.stream.value in cfg.var_streams):
            self.var_head = VarianceHead(len(FUSION_STAGES), cfg.n_clips_var,
                                         self.task.n_classes, cfg.var_hidden, cfg.var_norm)
        if self.stream is Stream.RGB:
            self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        else:
            self.register_buffer("mean", torch.zeros(1, in_ch, 1, 1))
            self.register_buffer("std", torch.ones(1, in_ch, 1, 1))

    def clip_forward(self, x, maps):
        """x: (K, C, H, W) clips, maps: (K, 1, H, W) or None -> (features, stage feats)."""
        whole, guides = guidance_images(x, maps, self.mode)
        norm = lambda t: (t - self.mean) / self.std
        return self.backbone(norm(whole), [norm(g) for g in guides])

    def forward(self, x, maps=None, x_var=None, maps_var=None):
        """x: (B, N, C, H, W). Returns dict with 'cls' logits and, when a
        variance head exists and var clips are given, 'var' logits and 'vmap'."""
        b, n = x.shape[:2]
        feats, _ = self.clip_forward(x.flatten(0, 1), None if maps is None else maps.flatten(0, 1))
        out = {"cls": self.fc(feats.view(b, n, -1).mean(1)), "features": feats.view(b, n, -1)}
        if self.var_head is not None and x_var is not None:
            nv = x_var.shape[1]
            _, stages = self.clip_forward(
                x_var.flatten(0, 1), None if maps_var is None else maps_var.flatten(0, 1))
            v = variance_map([s.view(b, nv, *s.shape[1:]) for s in stages], batched=True)
            out["vmap"] = v
            out["var"] = self.var_head(v)
        return out


def flow_input(flow):
    """(B, N, L, 2, H, W) -> (B, N, 2L, H, W) channel stacking."""
    return flow.flatten(2, 3)


class SGNet(nn.Module):
    """Container for every per-task/per-stream network plus the subject-map
    generator(s) and discriminator(s). ``sharing`` comes from the training
    task mode (see train.joint_training_wiring)."""

    def __init__(self, cfg: ModelConfig, tasks=(Task.SCALE, Task.MOVEMENT), sharing="separate"):
        super().__init__()
        self.cfg = cfg
        self.tasks = [Task(t) for t in tasks]
        self.sharing = sharing
        self.nets = nn.ModuleDict()
        for task in self.tasks:
            for stream in cfg.streams:
                self.nets[f"{task.value}_{stream.value}"] = StreamNet(task, stream, cfg)
        self.generators = nn.ModuleDict()
        self.discriminators = nn.ModuleDict()
        map_tasks = [t for t in self.tasks if cfg.uses_map(t)]
        if sharing != "separate" and len(map_tasks) > 1:
            self.generators["shared"] = StudentGenerator()
            self.discriminators["shared"] = Discriminator()
        else:
            for t in map_tasks:
                self.generators[t.value] = StudentGenerator()
                self.discriminators[t.value] = Discriminator()
        if sharing in ("res1", "res4") and len(self.tasks) == 2:
            self._share_stages(FUSION_STAGES[:1] if sharing == "res1" else FUSION_STAGES)
        if cfg.pretrained:
            load_pretrained(self, cfg.pretrained)

    def _share_stages(self, names):
        for stream in self.cfg.streams:
            a = self.nets[f"scale_{stream.value}"].backbone
            b = self.nets[f"movement_{stream.value}"].backbone
            for name in names:
                b.whole[name] = a.whole[name]
                for ga, gb in zip(a.guides, b.guides):
                    gb[name] = ga[name]
                if name in a.fuse and name in b.fuse and a.fuse[name].weight.shape == b.fuse[name].weight.shape:
                    b.fuse[name] = a.fuse[name]

    def generator_key(self, task):
        if "shared" in self.generators:
            return "shared"
        return Task(task).value if Task(task).value in self.generators else None

    def net(self, task, stream):
        return self.nets[f"{Task(task).value}_{Stream(stream).value}"]

    def stage_map(self):
        return {k: net.backbone.stage_names() for k, net in self.nets.items()}


def load_pretrained(model: SGNet, path):
    """Load backbone weights (torchvision-style resnet keys or a tiny-backbone
    state dict) into every whole-image and guidance branch."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    prefix_map = {"conv1.": "pool1.0.", "bn1.": "pool1.1.", "layer1.": "res2.",
                  "layer2.": "res3.", "layer3.": "res4.", "layer4.": "res5."}
    remapped = {}
    for k, v in state.items():
        for old, new in prefix_map.items():
            if k.startswith(old):
                k = new + k[len(old):]
                break
        remapped[k] = v
    for net in model.nets.values():
        for branch in [net.backbone.whole] + list(net.backbone.guides):
            own = branch.state_dict()
            sub = {}
            for k, v in remapped.items():
                if k in own:
                    if k == "pool1.0.weight":
                        v = inflate_first_conv(v, own[k].shape[1])
                    if own[k].shape == v.shape:
                        sub[k] = v
            branch.load_state_dict(sub, strict=False)


def count_gflops(module, *inputs):
    from torch.utils.flop_counter import FlopCounterMode

    was = module.training
    module.eval()
    with torch.no_grad(), FlopCounterMode(display=False) as counter:
        module(*inputs)
    module.train(was)
    return counter.get_total_flops() / 1e9
