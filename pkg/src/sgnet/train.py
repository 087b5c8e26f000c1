"""Training loop, evaluation, checkpoints and joint-training wiring."""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Manifest, Split, split_view
from .media import SampleMode, SamplingConfig, SourceCache, build_clip_stack
from .model import (FUSION_STAGES, VARMAP, ModelConfig, SGNet, Stream, Task, count_gflops,
                    flow_input, fuse_scores, softmax_scores, variance_map)
from .subject import Discriminator, KDLossWeights, kd_l2_loss, lsgan_losses, make_teacher

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TaskMode(Enum):
    SCALE_ONLY = "scale_only"
    MOVEMENT_ONLY = "movement_only"
    SEPARATE = "separate"
    JOINT_SHARE_SMG = "joint_share_smg"
    JOINT_SHARE_RES1 = "joint_share_res1"
    JOINT_SHARE_RES4 = "joint_share_res4"


@dataclass(frozen=True)
class SharingPlan:
    tasks: tuple
    share_generator: bool
    shared_stages: tuple

    @property
    def sharing(self):
        if not self.share_generator:
            return "separate"
        if not self.shared_stages:
            return "smg"
        return "res1" if self.shared_stages == FUSION_STAGES[:1] else "res4"


def joint_training_wiring(task_mode) -> SharingPlan:
    mode = TaskMode(task_mode)
    both = (Task.SCALE, Task.MOVEMENT)
    return {
        TaskMode.SCALE_ONLY: SharingPlan((Task.SCALE,), False, ()),
        TaskMode.MOVEMENT_ONLY: SharingPlan((Task.MOVEMENT,), False, ()),
        TaskMode.SEPARATE: SharingPlan(both, False, ()),
        TaskMode.JOINT_SHARE_SMG: SharingPlan(both, True, ()),
        TaskMode.JOINT_SHARE_RES1: SharingPlan(both, True, FUSION_STAGES[:1]),
        TaskMode.JOINT_SHARE_RES4: SharingPlan(both, True, FUSION_STAGES),
    }[mode]


def build_model(model_cfg: ModelConfig, task_mode=TaskMode.SEPARATE) -> SGNet:
    plan = joint_training_wiring(task_mode)
    return SGNet(model_cfg, plan.tasks, plan.sharing)


def shared_parameters(model: SGNet):
    """Parameter tensors reachable from both task graphs (by identity)."""
    def params_of(task):
        mods = [m for k, m in model.nets.items() if k.startswith(task.value + "_")]
        key = model.generator_key(task)
        if key is not None:
            mods += [model.generators[key], model.discriminators[key]]
        return {id(p): p for m in mods for p in m.parameters()}

    if len(model.tasks) < 2:
        return []
    a, b = params_of(Task.SCALE), params_of(Task.MOVEMENT)
    return [a[i] for i in a if i in b]


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    momentum: float = 0.9
    base_lr: float = 0.001
    lr_decay_epochs: Sequence[int] = (20, 40)
    lr_decay_factor: float = 10.0
    weight_decay: float = 0.0
    seed: int = 0
    task_mode: TaskMode = TaskMode.SEPARATE
    kd_alpha: float = 1.0
    kd_beta: float = 0.05
    teacher: str = "oracle"  # "files", "oracle" or "none"
    teacher_dir: Optional[str] = None
    disc_lr: Optional[float] = None  # defaults to base_lr, same schedule
    disc_grad_clip: Optional[float] = 5.0  # max grad norm for D; its LSGAN output is unbounded
    micro_batch: int = 32
    class_weighting: bool = False
    augment: bool = True
    deterministic: bool = True
    eval_batch: int = 16

    def __post_init__(self):
        self.task_mode = TaskMode(self.task_mode)
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        for name in ("epochs", "batch_size", "base_lr", "lr_decay_factor", "micro_batch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e <= 0 or e >= self.epochs for e in d):
            raise ValueError("lr_decay_epochs must be strictly increasing and inside (0, epochs)")
        KDLossWeights(self.kd_alpha, self.kd_beta)

    @property
    def kd_weights(self):
        return KDLossWeights(self.kd_alpha, self.kd_beta)

    def to_dict(self):
        d = asdict(self)
        d["task_mode"] = self.task_mode.value
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    n = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.base_lr / config.lr_decay_factor ** n


class TrainingError(RuntimeError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


# --------------------------------------------------------------- batching

def _seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class Batch:
    rgb: torch.Tensor  # (B, N, 3, S, S)
    flow: Optional[torch.Tensor]  # (B, N, 2L, S, S)
    teacher: Optional[torch.Tensor]  # (B, N, 1, S, S)
    var_rgb: Optional[torch.Tensor] = None
    var_flow: Optional[torch.Tensor] = None
    var_teacher: Optional[torch.Tensor] = None
    y_scale: Optional[torch.Tensor] = None
    y_movement: Optional[torch.Tensor] = None

    def __len__(self):
        return self.rgb.shape[0]


def _stack(stacks):
    rgb = torch.from_numpy(np.stack([s.rgb[:, 0] for s in stacks]))
    flow = None
    if stacks[0].flow is not None:
        flow = flow_input(torch.from_numpy(np.stack([s.flow for s in stacks])))
    teacher = None
    if all(s.teacher is not None for s in stacks):
        teacher = torch.from_numpy(np.stack([s.teacher for s in stacks]))
    return rgb, flow, teacher


def needs_var(model_cfg, tasks):
    return Task.MOVEMENT in tasks and model_cfg.use_variance_map


def make_batch(records, cache, model_cfg, tasks, mode, seeds, augment=True, n_clips=None, sources=None):
    """Sample clip stacks for ``records``; ``sources`` (aligned ShotSources)
    bypasses the cache, e.g. for cropped candidate shots."""
    use_flow = model_cfg.use_flow
    sources = sources or [cache.get(r) for r in records]
    base = SamplingConfig(
        n_clips=n_clips or (model_cfg.n_clips_cls if mode is SampleMode.TRAIN_RANDOM else model_cfg.n_clips_test),
        mode=mode, input_size=model_cfg.input_size,
        frames_per_clip_flow=model_cfg.frames_per_clip_flow, use_flow=use_flow, augment=augment)
    stacks = [build_clip_stack(r, base, seed=s, source=src) for r, s, src in zip(records, seeds, sources)]
    rgb, flow, teacher = _stack(stacks)
    batch = Batch(rgb, flow, teacher)
    if needs_var(model_cfg, tasks):
        var_cfg = base.with_(n_clips=model_cfg.n_clips_var,
                             use_flow=use_flow and "flow" in model_cfg.var_streams)
        vstacks = [build_clip_stack(r, var_cfg, seed=_seed(s, 1), source=src)
                   for r, s, src in zip(records, seeds, sources)]
        batch.var_rgb, batch.var_flow, batch.var_teacher = _stack(vstacks)
    if records[0].scale_label is not None:
        batch.y_scale = torch.tensor([r.scale_label.index for r in records])
        batch.y_movement = torch.tensor([r.movement_label.index for r in records])
    return batch


# ---------------------------------------------------------------- forward

def _subject_maps(model, batch):
    """Run each generator over the RGB frames it serves.

    Returns {gen_key: (maps, var_maps)} with maps shaped like the teacher maps.
    """
    out = {}
    for key, gen in model.generators.items():
        b, n = batch.rgb.shape[:2]
        frames = [batch.rgb.flatten(0, 1)]
        if batch.var_rgb is not None:
            frames.append(batch.var_rgb.flatten(0, 1))
        m = gen(torch.cat(frames))
        maps = m[: b * n].view(b, n, 1, *m.shape[-2:])
        var_maps = None
        if batch.var_rgb is not None:
            var_maps = m[b * n:].view(b, batch.var_rgb.shape[1], 1, *m.shape[-2:])
        out[key] = (maps, var_maps)
    return out


def forward_batch(model: SGNet, batch: Batch):
    """Logits for every (task, stream, head) plus generated maps."""
    maps = _subject_maps(model, batch)
    logits = {}
    for task in model.tasks:
        key = model.generator_key(task)
        m, vm = maps[key] if key is not None else (None, None)
        for stream in model.cfg.streams:
            net = model.net(task, stream)
            x = batch.rgb if stream is Stream.RGB else batch.flow
            xv = batch.var_rgb if stream is Stream.RGB else batch.var_flow
            o = net(x, m, xv if net.var_head is not None else None, vm)
            logits[(task, stream, "cls")] = o["cls"]
            if "var" in o:
                logits[(task, stream, VARMAP)] = o["var"]
    return logits, maps


def fused_probs(model: SGNet, logits, task):
    """(B, C) fused probabilities for one task."""
    w = model.cfg.fusion_weights
    acc, total = 0.0, 0.0
    for (t, stream, head), lg in logits.items():
        if t is not task:
            continue
        weight = w.get(VARMAP if head == VARMAP else stream.value, 1.0)
        acc = acc + weight * torch.softmax(lg.detach().double(), -1)
        total += weight
    p = acc / total
    return p / p.sum(-1, keepdim=True)


def _kd_terms(model, batch, maps):
    """Per-generator (l2, adv_gen, disc_loss); zero when no teacher maps."""
    terms = {}
    for key, (m, vm) in maps.items():
        if batch.teacher is None:
            continue
        s = m.flatten(0, 1)
        t = batch.teacher.flatten(0, 1)
        f = batch.rgb.flatten(0, 1)
        if vm is not None and batch.var_teacher is not None:
            s = torch.cat([s, vm.flatten(0, 1)])
            t = torch.cat([t, batch.var_teacher.flatten(0, 1)])
            f = torch.cat([f, batch.var_rgb.flatten(0, 1)])
        l2 = kd_l2_loss(s, t)
        disc = model.discriminators[key]
        d_real = disc(t, f)
        d_fake_det = disc(s.detach(), f)
        d_fake = disc(s, f)
        d_loss, g_loss = lsgan_losses(d_real, d_fake_det, d_fake)
        terms[key] = (l2, g_loss, d_loss)
    return terms


# ---------------------------------------------------------------- training

def _clip(params, max_norm):
    if max_norm:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], max_norm)


def _set_determinism(cfg):
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(cfg.deterministic, warn_only=True)


def _make_cache(model_cfg, train_cfg, root):
    teacher = None
    if any(model_cfg.uses_map(t) for t in Task) and train_cfg.teacher != "none":
        teacher = make_teacher(train_cfg.teacher, _teacher_dir(train_cfg, root))
    return SourceCache(root, model_cfg.input_size, teacher=teacher)


def _teacher_dir(train_cfg, root):
    if train_cfg.teacher != "files":
        return None
    d = Path(train_cfg.teacher_dir or "teacher")
    if not d.is_absolute() and root is not None:
        d = Path(root) / d
    return d


def _class_weights(records, task):
    counts = np.bincount([getattr(r, f"{task.value}_label").index for r in records],
                         minlength=task.n_classes).astype(np.float64)
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / task.n_classes, 0.0)
    return torch.tensor(w, dtype=torch.float32)


def _param_groups(model):
    main, disc = [], []
    for name, p in model.named_parameters():
        (disc if name.startswith("discriminators.") else main).append(p)
    return main, disc


def train(manifest: Manifest, model_cfg: ModelConfig, cfg: TrainConfig, out_dir,
          init_generator=None, cache=None, progress=None):
    """Train and write ``final.pt``, ``best.pt`` (when a VAL split exists) and
    ``train_log.jsonl`` under ``out_dir``. Returns (model, log records)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = split_view(manifest, Split.TRAIN)
    if not records:
        raise TrainingError("TRAIN split is empty")
    val = split_view(manifest, Split.VAL)
    _set_determinism(cfg)
    model = build_model(model_cfg, cfg.task_mode)
    if init_generator is not None:
        load_generator(model, init_generator)
    cache = cache or _make_cache(model_cfg, cfg, manifest.root)
    tasks = model.tasks
    main_params, disc_params = _param_groups(model)
    opt = torch.optim.SGD(main_params, lr=cfg.base_lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    opt_d = torch.optim.SGD(disc_params, lr=cfg.disc_lr or cfg.base_lr, momentum=cfg.momentum) \
        if disc_params else None
    class_w = {t: _class_weights(records, t) if cfg.class_weighting else None for t in tasks}
    kd = cfg.kd_weights
    rng = np.random.default_rng(cfg.seed)
    log_records = []
    best_score, best_epoch = -1.0, None
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        if opt_d is not None:
            for g in opt_d.param_groups:
                g["lr"] = (cfg.disc_lr or cfg.base_lr) * lr / cfg.base_lr
        model.train()
        t0 = time.perf_counter()
        order = rng.permutation(len(records))
        sums = {"loss": 0.0, "loss_cls": 0.0, "loss_l2": 0.0, "loss_adv": 0.0, "loss_disc": 0.0}
        correct = {t: 0 for t in tasks}
        bs = min(cfg.batch_size, len(records))
        for start in range(0, len(records), bs):
            idx = order[start:start + bs]
            opt.zero_grad(set_to_none=True)
            if opt_d is not None:
                opt_d.zero_grad(set_to_none=True)
            for ms in range(0, len(idx), cfg.micro_batch):
                chunk = idx[ms:ms + cfg.micro_batch]
                recs = [records[i] for i in chunk]
                seeds = [_seed(cfg.seed, epoch, i) for i in chunk]
                batch = make_batch(recs, cache, model_cfg, tasks, SampleMode.TRAIN_RANDOM, seeds,
                                   augment=cfg.augment)
                frac = len(chunk) / len(idx)
                logits, maps = forward_batch(model, batch)
                loss_cls = 0.0
                for (task, stream, head), lg in logits.items():
                    y = batch.y_scale if task is Task.SCALE else batch.y_movement
                    loss_cls = loss_cls + F.cross_entropy(lg, y, weight=class_w[task])
                terms = _kd_terms(model, batch, maps)
                l2 = sum(t[0] for t in terms.values()) if terms else torch.zeros(())
                adv = sum(t[1] for t in terms.values()) if terms else torch.zeros(())
                d_loss = sum(t[2] for t in terms.values()) if terms else None
                total = kd.alpha * l2 + kd.beta * adv + loss_cls
                values = {"loss": total, "loss_cls": loss_cls, "loss_l2": l2, "loss_adv": adv}
                if d_loss is not None:
                    values["loss_disc"] = d_loss
                bad = {k: float(v.detach()) for k, v in values.items() if not math.isfinite(float(v.detach()))}
                if bad:
                    dump = {"epoch": epoch, "batch_start": start, "lr": lr, "bad": bad,
                            "shots": [r.shot_id for r in recs]}
                    (out / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                    raise TrainingError(f"non-finite loss at epoch {epoch}: {bad}")
                # the generator objective also back-propagates into D; D keeps only disc_loss grads
                saved = [None if p.grad is None else p.grad.clone() for p in disc_params]
                (total * frac).backward()
                for p, g in zip(disc_params, saved):
                    p.grad = g
                if opt_d is not None and d_loss is not None:
                    (d_loss * frac).backward()
                for k, v in values.items():
                    sums[k] += float(v.detach() if torch.is_tensor(v) else v) * len(chunk)
                for task in tasks:
                    y = batch.y_scale if task is Task.SCALE else batch.y_movement
                    correct[task] += int((fused_probs(model, logits, task).argmax(-1) == y).sum())
            opt.step()
            if opt_d is not None:
                _clip(disc_params, cfg.disc_grad_clip)
                opt_d.step()
        rec = {"epoch": epoch, "lr": lr}
        rec.update({k: v / len(records) for k, v in sums.items()})
        for task in tasks:
            rec[f"train_acc_{task.value}"] = 100.0 * correct[task] / len(records)
        if val:
            report = evaluate_model(model, val, cache, Split.VAL, cfg.eval_batch)
            for task in tasks:
                rec[f"val_acc_{task.value}"] = report.acc(task)
            score = float(np.mean([report.acc(t) for t in tasks]))
            if score > best_score:
                best_score, best_epoch = score, epoch
                save_checkpoint(out / "best.pt", model, cfg, epoch=epoch, metrics=rec)
        rec["seconds"] = round(time.perf_counter() - t0, 3)
        log_records.append(rec)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        log.info("epoch %d lr %.2e loss %.4f %s", epoch, lr, rec["loss"],
                 " ".join(f"{k}={v:.1f}" for k, v in rec.items() if "acc" in k))
        if progress:
            progress(rec)
    save_checkpoint(out / "final.pt", model, cfg, epoch=cfg.epochs - 1,
                    metrics=log_records[-1], best_epoch=best_epoch)
    return model, log_records


# ------------------------------------------------------------ KD pretraining

def kd_pretrain(manifest, model_cfg: ModelConfig, cfg: TrainConfig, out_dir, epochs=None, progress=None):
    """Distil the student generator from teacher maps alone (L2 + adversarial),
    on the RGB frames of TRAIN shots. Writes ``kd.pt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = split_view(manifest, Split.TRAIN)
    if not records:
        raise TrainingError("TRAIN split is empty")
    if cfg.teacher == "none":
        raise TrainingError("KD pretraining needs a teacher (files or oracle)")
    _set_determinism(cfg)
    from .subject import StudentGenerator
    gen, disc = StudentGenerator(), Discriminator()
    cache = SourceCache(manifest.root, model_cfg.input_size,
                        teacher=make_teacher(cfg.teacher, _teacher_dir(cfg, manifest.root)))
    opt = torch.optim.SGD(gen.parameters(), lr=cfg.base_lr, momentum=cfg.momentum)
    opt_d = torch.optim.SGD(disc.parameters(), lr=cfg.disc_lr or cfg.base_lr, momentum=cfg.momentum)
    epochs = epochs or cfg.epochs
    sampling = SamplingConfig(n_clips=model_cfg.n_clips_cls, mode=SampleMode.TRAIN_RANDOM,
                              input_size=model_cfg.input_size, use_flow=False, augment=cfg.augment)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(epochs):
        lr = cfg.base_lr / cfg.lr_decay_factor ** sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
        for o in (opt, opt_d):
            for g in o.param_groups:
                g["lr"] = lr
        order = rng.permutation(len(records))
        tot = 0.0
        bs = min(cfg.batch_size, len(records))
        for start in range(0, len(records), bs):
            idx = order[start:start + bs]
            stacks = [build_clip_stack(records[i], sampling, _seed(cfg.seed, epoch, i), cache=cache) for i in idx]
            frames = torch.from_numpy(np.concatenate([s.rgb[:, 0] for s in stacks]))
            teacher = torch.from_numpy(np.concatenate([s.teacher for s in stacks]))
            fake = gen(frames)
            d_loss, g_loss = lsgan_losses(disc(teacher, frames), disc(fake.detach(), frames), disc(fake, frames))
            l2 = kd_l2_loss(fake, teacher)
            loss = cfg.kd_alpha * l2 + cfg.kd_beta * g_loss
            if not (torch.isfinite(loss) and torch.isfinite(d_loss)):
                dump = {"epoch": epoch, "batch_start": start, "lr": lr, "loss": float(loss.detach()),
                        "loss_disc": float(d_loss.detach()), "shots": [records[i].shot_id for i in idx]}
                (out / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                raise TrainingError(f"non-finite KD loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            opt_d.zero_grad()
            d_loss.backward()
            _clip(disc.parameters(), cfg.disc_grad_clip)
            opt_d.step()
            tot += float(loss.detach()) * len(idx)
        rec = {"epoch": epoch, "lr": lr, "loss": tot / len(records)}
        history.append(rec)
        if progress:
            progress(rec)
    torch.save({"format_version": CHECKPOINT_VERSION, "kind": "kd",
                "generator": gen.state_dict(), "discriminator": disc.state_dict(),
                "train_config": cfg.to_dict(), "history": history}, out / "kd.pt")
    return gen, history


def load_generator(model: SGNet, path):
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if ck.get("kind") != "kd":
        raise IncompatibleCheckpoint(f"{path} is not a KD generator checkpoint")
    for key in model.generators:
        model.generators[key].load_state_dict(ck["generator"])
        model.discriminators[key].load_state_dict(ck["discriminator"])


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: SGNet, cfg: TrainConfig, **extra):
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "sgnet",
        "model_config": model.cfg.to_dict(),
        "train_config": cfg.to_dict(),
        "task_mode": cfg.task_mode.value,
        "stage_map": model.stage_map(),
        "state_dict": model.state_dict(),
        **extra,
    }, path)
    return Path(path)


def load_checkpoint(path, model_cfg: Optional[ModelConfig] = None):
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if ck.get("kind") != "sgnet":
        raise IncompatibleCheckpoint(f"{path} is not a model checkpoint")
    if ck.get("format_version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint version {ck.get('format_version')}")
    saved = ModelConfig.from_dict(ck["model_config"])
    if model_cfg is not None:
        a, b = saved.to_dict(), model_cfg.to_dict()
        diff = sorted(k for k in a if a[k] != b.get(k))
        if diff:
            raise IncompatibleCheckpoint("checkpoint/model config mismatch: " + ", ".join(diff))
    model = build_model(saved, TaskMode(ck["task_mode"]))
    model.load_state_dict(ck["state_dict"])
    model.eval()
    model.train_config = TrainConfig.from_dict(ck["train_config"])
    return model


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    split: str
    n_shots: int
    acc_scale: Optional[float]
    acc_movement: Optional[float]
    confusion_scale: Optional[List[List[int]]]
    confusion_movement: Optional[List[List[int]]]
    config: Dict = field(default_factory=dict)
    stats: Dict = field(default_factory=dict)

    def acc(self, task):
        return self.acc_scale if Task(task) is Task.SCALE else self.acc_movement

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def table(self):
        lines = [f"split={self.split} shots={self.n_shots}"]
        for task, acc, cm in ((Task.SCALE, self.acc_scale, self.confusion_scale),
                              (Task.MOVEMENT, self.acc_movement, self.confusion_movement)):
            if acc is None:
                continue
            names = [c.value for c in task.labels]
            lines.append(f"Acc_{task.value[0].upper()} = {acc:.2f}%")
            lines.append("true\\pred " + " ".join(f"{n:>7}" for n in names))
            for name, row in zip(names, cm):
                lines.append(f"{name:>9} " + " ".join(f"{v:>7d}" for v in row))
        for k, v in sorted(self.stats.items()):
            lines.append(f"{k}: {v}")
        return "\n".join(lines)


def confusion(y_true, y_pred, n):
    cm = np.zeros((n, n), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[t, p] += 1
    return cm


def score_split(records, predictor, tasks=(Task.SCALE, Task.MOVEMENT), split="test", config=None, stats=None):
    """EvalReport from a predictor mapping a batch of records to
    {task: list of ScoreVector}."""
    preds = predictor(records)
    accs, cms = {}, {}
    for task in (Task.SCALE, Task.MOVEMENT):
        if task not in tasks:
            accs[task], cms[task] = None, None
            continue
        y = [getattr(r, f"{task.value}_label").index for r in records]
        p = [int(np.argmax(sv.probs)) for sv in preds[task]]
        cm = confusion(y, p, task.n_classes)
        accs[task] = 100.0 * float(np.trace(cm)) / max(1, len(records))
        cms[task] = cm.tolist()
    return EvalReport(str(split), len(records), accs[Task.SCALE], accs[Task.MOVEMENT],
                      cms[Task.SCALE], cms[Task.MOVEMENT], config or {}, stats or {})


def model_predictor(model: SGNet, cache, batch_size=16, n_clips=None):
    """Batch predictor: TEST_UNIFORM sampling, fused per-task ScoreVectors.
    ``sources`` optionally supplies a ShotSource per record."""
    def predict(records, sources=None):
        model.eval()
        out = {t: [] for t in model.tasks}
        with torch.no_grad():
            for start in range(0, len(records), batch_size):
                recs = records[start:start + batch_size]
                srcs = sources[start:start + batch_size] if sources is not None else None
                batch = make_batch(recs, cache, model.cfg, model.tasks, SampleMode.TEST_UNIFORM,
                                   [0] * len(recs), augment=False, n_clips=n_clips, sources=srcs)
                logits, _ = forward_batch(model, batch)
                for task in model.tasks:
                    prov = {VARMAP if h == VARMAP else s.value for (t, s, h) in logits if t is task}
                    p = fused_probs(model, logits, task).numpy()
                    out[task].extend(_score_vectors(task, p, prov))
        return out
    return predict


def shot_variance_maps(model: SGNet, records, cache, stream=Stream.RGB, batch_size=16):
    """(len(records), M, N, N) variance maps of the movement stream, sampled as at test time."""
    net = model.net(Task.MOVEMENT, stream)
    if net.var_head is None:
        raise ValueError(f"movement/{Stream(stream).value} has no variance head")
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            recs = records[start:start + batch_size]
            batch = make_batch(recs, cache, model.cfg, [Task.MOVEMENT], SampleMode.TEST_UNIFORM,
                               [0] * len(recs), augment=False)
            key = model.generator_key(Task.MOVEMENT)
            vm = _subject_maps(model, batch)[key][1] if key is not None else None
            x = batch.var_rgb if Stream(stream) is Stream.RGB else batch.var_flow
            b, n = x.shape[:2]
            _, stages = net.clip_forward(x.flatten(0, 1), None if vm is None else vm.flatten(0, 1))
            out.append(variance_map([s.view(b, n, *s.shape[1:]) for s in stages], batched=True))
    return torch.cat(out)


def _score_vectors(task, p, prov):
    from .model import ScoreVector
    return [ScoreVector(task, row, frozenset(prov)) for row in p]


def model_stats(model: SGNet):
    s = model.cfg.input_size
    stats = {}
    if model.generators:
        gen = next(iter(model.generators.values()))
        stats["generator_params"] = gen.parameter_count
        stats["generator_gflops"] = round(count_gflops(gen, torch.zeros(1, 3, s, s)), 6)
    for key, net in model.nets.items():
        x = torch.zeros(1, 1, net.in_channels, s, s)
        maps = torch.zeros(1, 1, 1, s, s) if net.mode != "none" else None
        stats[f"{key}_gflops_per_clip"] = round(count_gflops(net, x, maps), 6)
    stats["n_parameters"] = sum(p.numel() for p in model.parameters())
    return stats


def evaluate_model(model, records, cache, split=Split.TEST, batch_size=16):
    cfg_snapshot = {"model": model.cfg.to_dict(), "tasks": [t.value for t in model.tasks],
                    "sharing": model.sharing}
    return score_split(records, model_predictor(model, cache, batch_size), model.tasks,
                       Split(split).value, cfg_snapshot)


def evaluate(manifest: Manifest, checkpoint, split=Split.TEST, model_cfg=None, teacher_dir=None):
    records = split_view(manifest, split)
    if not records:
        raise TrainingError(f"split {Split(split).value!r} is empty")
    model = load_checkpoint(checkpoint, model_cfg)
    # subject maps come from the student at inference; no teacher needed
    cache = SourceCache(manifest.root, model.cfg.input_size)
    report = evaluate_model(model, records, cache, split, model.train_config.eval_batch)
    report.stats.update(model_stats(model))
    report.stats["n_clips_test"] = model.cfg.n_clips_test
    return report
