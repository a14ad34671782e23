"""Acceptance criteria 1-12, one test each.

Every test records a ``PASS``/``FAIL`` line (printed again in the terminal
summary by conftest). Criteria 5-9 and 11 need the desk-trained models: they
are trained once through the CLI and cached under ``.acceptance_cache/<key>``,
where the key hashes the desk config, the package source and the data files.
Training time is measured when the cache is filled and stored beside it.
"""
import hashlib
import json
import shutil
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import MNIST_DIR
from test_attacks import NoisySquash
from toporeformer import autodiff as ad
from toporeformer.attacks import (
    AttackConfig,
    TargetFn,
    bpda_gradient,
    ce_loss,
    cw_l2,
    eot_gradient,
    fgsm,
    pgd,
    true_gradient,
)
from toporeformer.cli import eval_subset, load_bundle, load_split, pipeline_config, resolve_config, run
from toporeformer.dataio import load_idx
from toporeformer.errors import IdxError, LabelOutOfRange
from toporeformer.models import Classifier, ClassifierArch
from toporeformer.pipeline import STAGES, ablation_run, evaluate_attack
from toporeformer.topology import bottleneck0, pairwise_distances, persistence0, topo_loss, topo_loss_backward

RESULTS: dict[int, str] = {}
ROOT = Path(__file__).resolve().parents[1]

DESK = {
    "seed": 0,
    "data": {"root": str(MNIST_DIR), "dataset": "mnist", "num_classes": 10},
    "pipeline": {
        "classifier_epochs": 20, "topoae_epochs": 20, "reformer_epochs": 10, "warmup_epochs": 3,
        "batch_size": 64, "clf_conv1": 16, "clf_conv2": 32, "clf_hidden": 128,
    },
}
TRAIN_BUDGET_S = 30 * 60
STRONG_CW = AttackConfig(kind="cw", c=10.0, steps=200, craft_on="classifier")
ADAPTIVE_EPS = 0.3
ADAPTIVE_PER_CLASS = 20


def record(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# ------------------------------------------------------------ 1. gradients


def _mlp_loss(params, x, y):
    h = ad.relu(x @ params[0] + params[1])
    h = ad.tanh(h @ params[2] + params[3])
    return ad.softmax_cross_entropy(h @ params[4] + params[5], y)


def _mlp_gradcheck(seed: int) -> float:
    rng = np.random.default_rng(seed)
    shapes = [(6, 8), (8,), (8, 8), (8,), (8, 4), (4,)]
    raw = [rng.standard_normal(s) * 0.7 for s in shapes]
    x, y = rng.standard_normal((5, 6)), rng.integers(0, 4, 5)
    with ad.Tape() as tape:
        leaves = [tape.leaf(p) for p in raw]
        loss = _mlp_loss(leaves, x, y)
    analytic = tape.gradients(loss, leaves)
    h, worst = 1e-5, 0.0
    for i, p in enumerate(raw):
        for idx in np.ndindex(p.shape):
            up = [q.copy() for q in raw]
            dn = [q.copy() for q in raw]
            up[i][idx] += h
            dn[i][idx] -= h
            num = (float(_mlp_loss(up, x, y).data) - float(_mlp_loss(dn, x, y).data)) / (2 * h)
            worst = max(worst, abs(analytic[i][idx] - num) / max(1.0, abs(analytic[i][idx])))
    return worst


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    per_op = {op: max(ad.finite_diff_check(op, seed=s) for s in range(50)) for op in ad.OP_KINDS}
    mlp = _mlp_gradcheck(0)
    elapsed = time.perf_counter() - t0
    worst_op = max(per_op, key=per_op.get)
    ok = per_op[worst_op] < 1e-4 and mlp < 1e-3 and elapsed < 60
    record(1, ok, f"{len(per_op)} ops x 50 seeds, worst {worst_op} {per_op[worst_op]:.1e} (< 1e-4); "
                  f"3-layer MLP {mlp:.1e} (< 1e-3); {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------- 2. persistence


def _kruskal_lengths(dist):
    """Brute-force Kruskal: full sorted edge list, set-merging components."""
    n = len(dist)
    edges = sorted((dist[i][j], i, j) for i in range(n) for j in range(i + 1, n))
    comp = {i: frozenset([i]) for i in range(n)}
    accepted = []
    for d, i, j in edges:
        if comp[i] != comp[j]:
            merged = comp[i] | comp[j]
            for k in merged:
                comp[k] = merged
            accepted.append(d)
    return accepted


def _random_cloud(rng):
    n = int(rng.integers(2, 33))
    if rng.random() < 0.25:  # integer lattice points: many tied distances
        return rng.integers(0, 4, (n, 2)).astype(np.float64) + np.arange(n)[:, None] * [0, 10]
    return rng.standard_normal((n, int(rng.integers(1, 6))))


def test_criterion_02_persistence_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(200):
        dist = pairwise_distances(_random_cloud(rng))
        pairing, diagram = persistence0(dist)
        accepted = _kruskal_lengths(dist)
        weight = 0.0
        for d in (dist[i, j] for i, j in pairing):
            weight += d
        mst = 0.0
        for d in accepted:
            mst += d
        deaths_ok = np.array_equal(np.sort(diagram.deaths()), np.sort(accepted))
        bad += not (weight == mst and deaths_ok)
    elapsed = time.perf_counter() - t0
    record(2, bad == 0 and elapsed < 60,
           f"200 clouds (n <= 32, some with ties): {200 - bad} exact MST weight and death matches; {elapsed:.1f}s")


# -------------------------------------------------------- 3. topological loss


def _min_gap(d):
    return np.min(np.diff(np.sort(d[np.triu_indices(len(d), 1)])))


def _backward_error(rng):
    while True:
        x, z = rng.standard_normal((16, 8)), rng.standard_normal((16, 8))
        if min(_min_gap(pairwise_distances(x)), _min_gap(pairwise_distances(z))) > 1e-6:
            break
    pi_x, pi_z = persistence0(pairwise_distances(x))[0], persistence0(pairwise_distances(z))[0]
    gx, gz = topo_loss_backward(x, z, pi_x, pi_z)

    def loss(xx, zz):
        return topo_loss(pairwise_distances(xx), pairwise_distances(zz), pi_x, pi_z)[0]

    h, worst = 1e-6, 0.0
    for pts, grad, first in ((x, gx, True), (z, gz, False)):
        for idx in np.ndindex(pts.shape):
            up, dn = pts.copy(), pts.copy()
            up[idx] += h
            dn[idx] -= h
            num = (loss(up, z) - loss(dn, z)) / (2 * h) if first else (loss(x, up) - loss(x, dn)) / (2 * h)
            worst = max(worst, abs(grad[idx] - num) / max(1.0, abs(grad[idx])))
    return worst


def test_criterion_03_topological_loss_properties():
    rng = np.random.default_rng(3)
    iso = 0.0
    for _ in range(50):
        n, dim = int(rng.integers(2, 20)), int(rng.integers(1, 6))
        x = rng.standard_normal((n, dim))
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        z = x @ q + rng.standard_normal(dim)
        a_x, a_z = pairwise_distances(x), pairwise_distances(z)
        iso = max(iso, topo_loss(a_x, a_z, persistence0(a_x)[0], persistence0(a_z)[0])[0])
    grad = max(_backward_error(rng) for _ in range(5))
    stab_death = stab_bottle = 0.0
    for delta in (1e-3, 1e-2):
        for _ in range(100):
            n = int(rng.integers(2, 25))
            pts = rng.standard_normal((n, 3))
            step = rng.standard_normal((n, 3))
            step *= delta * rng.uniform(0, 1, (n, 1)) / np.linalg.norm(step, axis=1, keepdims=True)
            d0 = persistence0(pairwise_distances(pts))[1]
            d1 = persistence0(pairwise_distances(pts + step))[1]
            stab_death = max(stab_death, np.max(np.abs(np.sort(d0.deaths()) - np.sort(d1.deaths()))) / delta)
            stab_bottle = max(stab_bottle, bottleneck0(d0, d1) / delta)
    ok = iso <= 1e-9 and grad < 1e-4 and stab_death <= 2 + 1e-9 and stab_bottle <= 2 + 1e-9
    record(3, ok, f"isometry max L_t {iso:.1e} (<= 1e-9); backward vs FD {grad:.1e} (< 1e-4); "
                  f"stability death shift {stab_death:.3f}*delta, bottleneck {stab_bottle:.3f}*delta (<= 2*delta)")


# ------------------------------------------------------- 4. attack contracts


def test_criterion_04_attack_contracts():
    clf = Classifier(ClassifierArch(conv1=4, conv2=6, hidden=16, num_classes=10), seed=0)
    target = TargetFn(clf)
    rng = np.random.default_rng(4)
    calls = ball_ok = 0
    for trial in range(12):
        x = rng.uniform(size=(4, 1, 28, 28))
        x[:, :, :3] = 0.0
        x[:, :, -3:] = 1.0  # pixels pinned at the box edges
        y = rng.integers(0, 10, 4)
        eps = float(rng.choice([0.0, 0.01, 0.1, 0.3, 1 / 3]))
        outs = [fgsm(target, x, y, eps, seed=trial),
                pgd(target, x, y, AttackConfig(kind="pgd", eps=eps, steps=5, seed=trial))]
        for out in outs:
            calls += 1
            ball_ok += bool(np.all(np.abs(out - x) <= eps) and out.min() >= 0 and out.max() <= 1)
    x = rng.uniform(size=(4, 1, 28, 28))
    y = rng.integers(0, 10, 4)
    one_step = pgd(target, x, y, AttackConfig(kind="pgd", eps=0.1, alpha=0.1, steps=1, random_start=False))
    pgd_is_fgsm = np.array_equal(one_step, fgsm(target, x, y, 0.1))
    cw = cw_l2(target, x, y, AttackConfig(kind="cw", c=10.0, steps=30))[0]
    cw_ok = cw.min() >= 0 and cw.max() <= 1
    cfg = AttackConfig(kind="pgd", eps=0.2, steps=4, seed=9)
    repro = np.array_equal(pgd(target, x, y, cfg), pgd(target, x, y, cfg))
    record(4, ball_ok == calls and pgd_is_fgsm and cw_ok and repro,
           f"{ball_ok}/{calls} FGSM/PGD outputs inside eps-ball and [0,1]; PGD(1, alpha=eps) == FGSM: {pgd_is_fgsm}; "
           f"C&W in [0,1]: {cw_ok}; seeded PGD reproducible: {repro}")


# --------------------------------------------------- desk-trained models


def _cache_key() -> str:
    h = hashlib.sha256(json.dumps(DESK, sort_keys=True).encode())
    for path in sorted((ROOT / "src" / "toporeformer").glob("*.py")):
        h.update(path.name.encode() + path.read_bytes())
    for path in sorted(MNIST_DIR.glob("*-ubyte")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_run(mnist_dir):
    """Output directory with all desk-trained artifacts plus measured training time."""
    out = ROOT / ".acceptance_cache" / _cache_key()
    timing = out / "training_time.json"
    if not timing.exists():
        shutil.rmtree(out, ignore_errors=True)
        out.mkdir(parents=True)
        cfg = out / "desk.json"
        cfg.write_text(json.dumps(DESK, indent=2))
        seconds = {}
        for cmd in ("train-classifier", "train-topoae", "train-reformer"):
            t0 = time.perf_counter()
            assert run([cmd, "--config", str(cfg), "--out", str(out)]) == 0
            seconds[cmd] = time.perf_counter() - t0
        timing.write_text(json.dumps(seconds, indent=2))
    tree = resolve_config(DESK)
    bundle = load_bundle(out, tree, 10, require=("classifier.trfm", "topoae.trfm", "reformer.trfm"))
    return out, tree, bundle, json.loads(timing.read_text())


@pytest.fixture(scope="session")
def test_set(desk_run):
    return load_split(desk_run[1], "test")


@pytest.fixture(scope="session")
def strong_cw_report(desk_run, test_set):
    _, tree, bundle, _ = desk_run
    return ablation_run(test_set, [AttackConfig(kind="none"), STRONG_CW], bundle, pipeline_config(tree))


def _f1(report, stage, kind):
    rows = next(s for s in report["stages"] if s["name"] == stage)["attacks"]
    return next(r for r in rows if r["kind"] == kind)["f1_macro"]


def test_criterion_05_clean_performance(desk_run, test_set, strong_cw_report):
    train_s = sum(desk_run[3].values())
    clean = {st["name"]: next(r for r in st["attacks"] if r["kind"] == "none")["accuracy"]
             for st in strong_cw_report["stages"]}
    base = clean["No Defense"]
    worst = min(STAGES[1:], key=clean.get)
    ok = base >= 0.97 and clean["+ Warmup"] >= base - 0.02 and train_s < TRAIN_BUDGET_S
    stages = ", ".join(f"{s} {clean[s]:.3f}" for s in STAGES)
    record(5, ok, f"classifier {base:.3f} (>= 0.97); full pipeline {clean['+ Warmup']:.3f} (>= {base - 0.02:.3f}); "
                  f"[{stages}]; lowest stage {worst}; training {train_s / 60:.1f} min (< 30)")


def test_criterion_06_undefended_vulnerability(strong_cw_report):
    f1 = _f1(strong_cw_report, "No Defense", "cw")
    record(6, f1 <= 0.15, f"C&W c=10, 200 steps, undefended macro-F1 {f1:.3f} (<= 0.15)")


def test_criterion_07_defense_efficacy(strong_cw_report):
    f1 = [_f1(strong_cw_report, s, "cw") for s in STAGES]
    gain = f1[-1] - f1[0]
    drops = [b - a for a, b in zip(f1, f1[1:])]
    ok = gain >= 0.40 and min(drops) >= -0.03
    record(7, ok, f"C&W F1 by stage {' -> '.join(f'{v:.3f}' for v in f1)}; gain {gain * 100:.1f} points (>= 40); "
                  f"largest stage-to-stage drop {max(0.0, -min(drops)) * 100:.1f} points (<= 3)")


def test_criterion_08_warmup_benefit(strong_cw_report):
    aux, warm = _f1(strong_cw_report, "+ Aux", "cw"), _f1(strong_cw_report, "+ Warmup", "cw")
    record(8, warm >= aux - 0.02, f"C&W F1 W=3 {warm:.3f} vs W=0 {aux:.3f} (W>0 >= W=0 - 2 points)")


def test_criterion_09_adaptive_attacks(desk_run, test_set):
    bundle = desk_run[2]
    data = eval_subset(test_set, ADAPTIVE_PER_CLASS)
    asr = {}
    for stage in ("No Defense", "+ Warmup"):
        target = bundle.target(stage)
        for kind in ("eot_pgd", "bpda_pgd"):
            asr[stage, kind] = evaluate_attack(target, data, AttackConfig(kind=kind, eps=ADAPTIVE_EPS))["asr"]
    eot, bpda = asr["+ Warmup", "eot_pgd"], asr["+ Warmup", "bpda_pgd"]
    undefended = min(asr["No Defense", "eot_pgd"], asr["No Defense", "bpda_pgd"])
    ok = eot <= 0.40 and bpda >= eot + 0.20 and undefended >= 0.95
    record(9, ok, f"eps={ADAPTIVE_EPS}, 40 steps, K=8, {len(data.labels)} images: defended EOT-PGD ASR {eot:.3f} "
                  f"(<= 0.40), BPDA-PGD ASR {bpda:.3f} (>= EOT + 0.20); undefended min ASR {undefended:.3f} (>= 0.95)")


# ------------------------------------------------------------ 10. mechanisms


def test_criterion_10_mechanisms():
    clf = Classifier(ClassifierArch(conv1=4, conv2=6, hidden=16, num_classes=10), seed=0)
    rng = np.random.default_rng(10)
    x, y = rng.uniform(size=(6, 1, 28, 28)), rng.integers(0, 10, 6)
    pur = NoisySquash(seed=3)
    target = TargetFn(clf, pur, pur.noise_dim)
    u = pur(ad.Tensor(x), np.zeros((len(x), pur.noise_dim))).data
    bpda_exact = np.array_equal(bpda_gradient(target, x, y), true_gradient(TargetFn(clf), u, ce_loss(y))[1])
    variances = {}
    for k in (1, 4, 16):
        draws = np.stack([eot_gradient(target, x[:2], y[:2], k, seed=1000 + r) for r in range(30)])
        variances[k] = draws.var(axis=0, ddof=1).sum()
    ratios = [variances[1] / variances[4], variances[4] / variances[16]]
    ok = bpda_exact and all(2.0 <= r <= 8.0 for r in ratios)
    record(10, ok, f"BPDA gradient bit-equal to classifier gradient at purified point: {bpda_exact}; "
                   f"EOT variance ratios K 1->4 {ratios[0]:.2f}, 4->16 {ratios[1]:.2f} (4 within factor 2)")


# ----------------------------------------------------------- 11. determinism


def test_criterion_11_determinism(desk_run, tmp_path):
    out, _, _, _ = desk_run
    cfg = {**DESK, "eval": {"per_class": 5}, "attacks": [
        {"kind": "fgsm", "eps": 0.1},
        {"kind": "pgd", "eps": 0.1, "steps": 5},
        {"kind": "cw", "c": 10.0, "steps": 20},
        {"kind": "cw", "c": 10.0, "steps": 20, "craft_on": "classifier"},
        {"kind": "bpda_pgd", "eps": 0.3, "steps": 5},
        {"kind": "eot_pgd", "eps": 0.3, "steps": 3, "eot_samples": 2},
    ]}
    reports = []
    for name in ("a", "b"):
        run_dir = tmp_path / name
        run_dir.mkdir()
        for artifact in ("classifier.trfm", "topoae.trfm", "reformer.trfm"):
            shutil.copy(out / artifact, run_dir / artifact)
        (run_dir / "ablate.json").write_text(json.dumps(cfg))
        assert run(["ablate", "--config", str(run_dir / "ablate.json"), "--out", str(run_dir)]) == 0
        reports.append(((run_dir / "ablation.json").read_bytes(), (run_dir / "ablation.csv").read_bytes()))
    same = reports[0] == reports[1]
    record(11, same, f"two ablate runs (5 stages x 6 attacks, seed 0): JSON and CSV byte-identical: {same}")


# ------------------------------------------------------------------ 12. I/O


def _idx_pair(tmp_path):
    body = bytearray(2 * 784)
    body[3 * 28 + 5] = 255
    body[784 + 27 * 28] = 255
    img, lbl = tmp_path / "img.idx", tmp_path / "lbl.idx"
    img.write_bytes(struct.pack(">IIII", 0x803, 2, 28, 28) + bytes(body))
    lbl.write_bytes(struct.pack(">II", 0x801, 2) + bytes([7, 2]))
    return img, lbl


def test_criterion_12_robust_io(tmp_path):
    img, lbl = _idx_pair(tmp_path)
    ds = load_idx(img, lbl, num_classes=10)
    expected = np.zeros((2, 1, 28, 28))
    expected[0, 0, 3, 5] = expected[1, 0, 27, 0] = 1.0
    exact = np.array_equal(ds.images, expected) and ds.labels.tolist() == [7, 2]
    rng = np.random.default_rng(12)
    good = {"img": img.read_bytes(), "lbl": lbl.read_bytes()}
    fuzz = tmp_path / "fuzz"
    counts = {"typed": 0, "loaded": 0, "crash": 0}
    for _ in range(300):
        which = "img" if rng.random() < 0.5 else "lbl"
        data = bytearray(good[which])
        mode = rng.integers(0, 4)
        if mode == 0:
            data = data[: rng.integers(0, len(data))]
        elif mode == 1:
            data[rng.integers(0, 4)] = rng.integers(0, 256)  # magic
        elif mode == 2:
            data[rng.integers(4, 8 if which == "lbl" else 16)] = rng.integers(0, 256)  # dims
        else:
            data += bytes(int(rng.integers(1, 40)))
        fuzz.write_bytes(bytes(data))
        try:
            load_idx(*((fuzz, lbl) if which == "img" else (img, fuzz)), num_classes=256)
        except (IdxError, LabelOutOfRange):
            counts["typed"] += 1
        except Exception:  # noqa: BLE001 - any other exception is the failure being counted
            counts["crash"] += 1
        else:
            counts["loaded"] += 1
    record(12, exact and counts["crash"] == 0,
           f"fixture bit-exact: {exact}; 300 mutated files -> {counts['typed']} typed errors, "
           f"{counts['loaded']} consistent loads, {counts['crash']} untyped exceptions")
