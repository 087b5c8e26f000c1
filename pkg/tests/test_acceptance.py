"""Acceptance checks, one per criterion. Each prints a single PASS/FAIL line
(collected again in the terminal summary)."""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from ablation import COMPARISONS, DATA_SEED, N_SHOTS, SEEDS, SPLITS, run_arm
from gradutil import analytic_grad, numeric_grad, rel_error
from sgnet.cli import EXIT_OK, main
from sgnet.data import Split, parse_manifest, split_view
from sgnet.edit import identity_plan
from sgnet.fixtures import make_shot_dataset
from sgnet.media import SourceCache, read_video
from sgnet.model import ModelConfig, Task, VarianceHead, make_guidance_inputs, softmax_scores, variance_map
from sgnet.subject import Discriminator, StudentGenerator, adversarial_losses, kd_l2_loss
from sgnet.train import TrainConfig, evaluate, load_checkpoint, lr_at, shot_variance_maps

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk_overfit.yaml"
RESULTS = []


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def brute_cosine(feats):
    vecs = [f.double().flatten().tolist() for f in feats]
    out = np.zeros((len(vecs), len(vecs)))
    for i, a in enumerate(vecs):
        for j, b in enumerate(vecs):
            dot = sum(x * y for x, y in zip(a, b))
            out[i, j] = dot / (sum(x * x for x in a) ** 0.5 * sum(y * y for y in b) ** 0.5)
    return out


# ------------------------------------------------------------ 1. invariants

def test_criterion_1_invariants():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    failures = []
    for _ in range(50):
        n = int(torch.randint(2, 9, (1,), generator=g))
        feats = [torch.randn(n, 4, 3, 3, generator=g) for _ in range(4)]
        v = variance_map(feats)
        if not torch.equal(v, v.transpose(-1, -2)):
            failures.append("symmetry")
        if not torch.all(torch.diagonal(v, dim1=-2, dim2=-1) == 1):
            failures.append("diagonal")
        if v.min() < -1 or v.max() > 1:
            failures.append("range")
    gen = StudentGenerator().eval()
    with torch.no_grad():
        for _ in range(10):
            m = gen(torch.rand(2, 3, 32, 32, generator=g) * 4 - 2)
            if m.min() < 0 or m.max() > 1:
                failures.append("subject map range")
    for _ in range(50):
        frame = torch.rand(3, 16, 16, generator=g)
        m = torch.rand(16, 16, generator=g)
        subj, _ = make_guidance_inputs(frame, m, Task.SCALE)
        back, _ = make_guidance_inputs(frame, m, Task.MOVEMENT)
        if (subj + back - frame).abs().max() > 1e-6:
            failures.append("reconstruction")
    head = VarianceHead(4, 8, 4).eval()
    for _ in range(20):
        logits = head(variance_map([torch.randn(8, 4, 2, 2, generator=g) for _ in range(4)]))
        if abs(softmax_scores(logits, Task.MOVEMENT, {"varmap"}).probs.sum() - 1) > 1e-6:
            failures.append("softmax")
    cfg = TrainConfig()
    table = {0: 1e-3, 19: 1e-3, 20: 1e-4, 39: 1e-4, 40: 1e-5, 59: 1e-5}
    for epoch, want in table.items():
        if not np.isclose(lr_at(cfg, epoch), want, rtol=1e-12, atol=0):
            failures.append(f"lr at epoch {epoch}")
    dt = time.perf_counter() - t0
    report(1, not failures and dt <= 120, f"{len(set(failures))} invariant(s) violated {sorted(set(failures))}, {dt:.1f} s (<= 120 s)")


# ------------------------------------------------------------- 2. oracle

def test_criterion_2_brute_force_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.choice([2, 3, 8]))
        c, h, w = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        feats = torch.from_numpy(rng.standard_normal((n, c, h, w)).astype(np.float32))
        got = variance_map([feats])[0].double().numpy()
        worst = max(worst, float(np.abs(got - brute_cosine(feats)).max()))
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-6 and dt <= 60, f"max |diff| {worst:.2e} (<= 1e-6) over 100 instances, {dt:.1f} s (<= 60 s)")


# ------------------------------------------------------- 3. gradient checks

def test_criterion_3_gradient_checks():
    torch.manual_seed(0)
    errs = {}
    t = torch.rand(4, 4, dtype=torch.float64)
    s = torch.rand(4, 4, dtype=torch.float64)
    errs["kd_l2"] = rel_error(*(f(lambda x: kd_l2_loss(x, t), s) for f in (analytic_grad, numeric_grad)))

    disc = Discriminator(frame_channels=0, width=4).double()
    real = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    fake = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    fd = lambda r: adversarial_losses(disc, r, fake)[0]
    fg = lambda f: adversarial_losses(disc, real, f)[1]
    errs["adversarial_disc"] = rel_error(analytic_grad(fd, real), numeric_grad(fd, real))
    errs["adversarial_gen"] = rel_error(analytic_grad(fg, fake), numeric_grad(fg, fake))

    head = VarianceHead(1, 3, 4, hidden=8).double()
    head.norm.running_mean.uniform_(-0.5, 0.5)
    head.norm.running_var.uniform_(0.5, 1.5)
    head.eval()
    feats = torch.randn(2, 3, 4, 1, 1, dtype=torch.float64)
    target = torch.tensor([1, 3])
    fv = lambda x: torch.nn.functional.cross_entropy(head(variance_map([x], batched=True)), target)
    errs["variance_map+head"] = rel_error(analytic_grad(fv, feats), numeric_grad(fv, feats))
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(3, worst <= 1e-4, f"relative errors {detail} (<= 1e-4)")


# ------------------------------------------- 4, 6, 8: desk training via CLI

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    manifest = make_shot_dataset(root / "ds", 40, seed=0)
    runs, times = [], []
    for name in ("a", "b"):
        t0 = time.process_time()
        assert main(["train", "--config", str(DESK_CONFIG), "--manifest", str(manifest),
                     "--out", str(root / name)]) == EXIT_OK
        times.append(time.process_time() - t0)
        runs.append(root / name / "final.pt")
    return manifest, runs, times


def test_criterion_4_overfit(desk_run):
    manifest, (ck_a, ck_b), times = desk_run
    m = parse_manifest(manifest)
    rep = evaluate(m, ck_a, Split.TRAIN)
    sa = torch.load(ck_a, weights_only=False)["state_dict"]
    sb = torch.load(ck_b, weights_only=False)["state_dict"]
    same = sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
    epochs = yaml.safe_load(DESK_CONFIG.read_text())["train"]["epochs"]
    ok = rep.acc_scale >= 95 and rep.acc_movement >= 95 and same and max(times) <= 3600 and epochs == 30
    report(4, ok, f"train Top-1 scale {rep.acc_scale:.1f} / movement {rep.acc_movement:.1f} (>= 95) after "
                  f"{epochs} epochs on {len(m)} shots, identical weights on rerun: {same}, "
                  f"{max(times):.0f} s CPU per run (<= 3600 s)")


def test_criterion_6_budget(desk_run, tmp_path):
    manifest, (ck, _), _ = desk_run
    out = tmp_path / "report.json"
    assert main(["eval", "--manifest", str(manifest), "--checkpoint", str(ck), "--split", "train",
                 "--report", str(out)]) == EXIT_OK
    stats = json.loads(out.read_text())["stats"]
    n_gen = StudentGenerator().parameter_count
    gflops = {k: v for k, v in stats.items() if "gflops" in k}
    ok = n_gen <= 100_000 and stats.get("generator_params") == n_gen and gflops.get("generator_gflops", 0) > 0
    report(6, ok, f"student generator {n_gen} params (<= 100000), eval report GFLOPs "
                  + ", ".join(f"{k}={v:g}" for k, v in sorted(gflops.items())))


def test_criterion_8_round_trip(desk_run, tmp_path):
    manifest, (ck, _), _ = desk_run
    reports = []
    for i in range(2):
        out = tmp_path / f"r{i}.json"
        assert main(["eval", "--manifest", str(manifest), "--checkpoint", str(ck), "--report", str(out),
                     "--split", "train"]) == EXIT_OK
        reports.append(out.read_bytes())
    identical = reports[0] == reports[1]

    m = parse_manifest(manifest)
    rec = m.records[0]
    src = m.resolve(rec)
    frames = read_video(src)
    h, w = frames.shape[1:3]
    plan = tmp_path / "identity.plan.json"
    plan.write_text(json.dumps(identity_plan(src, rec.frame_start, rec.frame_end, w, h, "MS", rec.fps).to_dict()))
    assert main(["edit", "--plan", str(plan), "--out", str(tmp_path / "identity.avi")]) == EXIT_OK
    out = read_video(tmp_path / "identity.avi")
    corr = float(np.corrcoef(out.astype(np.float64).ravel(), frames.astype(np.float64).ravel())[0, 1]) \
        if out.shape == frames.shape else float("nan")
    report(8, identical and corr >= 0.99,
           f"eval reports bit-identical: {identical}; identity edit correlation {corr:.6f} (>= 0.99)")


# -------------------------------------------------------- 5, 7: ablations

@pytest.fixture(scope="module")
def ablations(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    manifest = parse_manifest(make_shot_dataset(root / "ds", N_SHOTS, seed=DATA_SEED, splits=SPLITS))
    acc, dirs = {}, {}
    for comp, (_, _, _, arms) in COMPARISONS.items():
        for arm in arms:
            for seed in SEEDS:
                out = root / f"{comp}_{arm}_{seed}"
                acc[comp, arm, seed] = run_arm(manifest, comp, arm, seed, out)
                dirs[comp, arm, seed] = out
    return manifest, acc, dirs


def test_criterion_5_ablation_ordering(ablations):
    _, acc, _ = ablations
    parts, ok = [], True
    for comp, (_, metric, _, arms) in COMPARISONS.items():
        better, worse = list(arms)
        mb = np.mean([acc[comp, better, s] for s in SEEDS])
        mw = np.mean([acc[comp, worse, s] for s in SEEDS])
        ok &= mb > mw
        parts.append(f"{comp}: {better} {mb:.1f} vs {worse} {mw:.1f} ({metric})")
    report(5, ok, f"test accuracy over seeds {list(SEEDS)}, {N_SHOTS} shots; " + "; ".join(parts))


def test_criterion_7_variance_map_structure(ablations):
    manifest, _, dirs = ablations
    model = load_checkpoint(dirs["variance_map", "with", SEEDS[0]] / "final.pt")
    records = split_view(manifest, Split.TEST)
    v = shot_variance_maps(model, records, SourceCache(manifest.root, model.cfg.input_size))
    n = v.shape[-1]
    off = ~torch.eye(n, dtype=torch.bool)
    mean_off = {}
    for mv in ("static", "motion"):
        idx = [i for i, r in enumerate(records) if r.movement_label.value == mv]
        mean_off[mv] = v[idx].mean(0)[:, off].mean().item()
    ok = mean_off["static"] >= 0.95 and mean_off["motion"] < mean_off["static"]
    report(7, ok, f"mean off-diagonal on held-out fixtures: static {mean_off['static']:.4f} (>= 0.95), "
                  f"motion {mean_off['motion']:.4f} (< static)")
