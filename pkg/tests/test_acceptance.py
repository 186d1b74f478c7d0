"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

The training-based criteria (5-9) take roughly 20 minutes on one CPU core.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import scipy.linalg
import torch
import torch.nn.functional as F

from pldg.backbone import EncoderConfig, ViTEncoder, build_encoder
from pldg.data import DatasetBundle, generate_trap
from pldg.discovery import nmi
from pldg.evalkit import accuracy, frechet_from_moments, roc_auc
from pldg.experiments import (
    METHODS,
    _slug,
    bench_trap,
    cluster_nmi_experiment,
    distance_weight_experiment,
    run_bench,
    run_trap,
    train_preset,
)
from pldg.objectives import Toggles, compute_step_loss, mixup_batch, mixup_loss, weight_supervision
from pldg.prompts import Adapter, PromptGenerator, weighted_prompt
from pldg.trainer import TrainConfig, fit


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")

    return emit


# --------------------------------------------------------------------------
# 1. gradient suite


def _tiny_parts(seed=0):
    cfg = EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2)
    enc = build_encoder(cfg, seed=seed, dtype=torch.float64)
    torch.manual_seed(seed + 1)
    gen = PromptGenerator(3, 2, 16).double()
    adapter = Adapter(16, 3, zero_init=False).double()
    g = torch.Generator().manual_seed(seed + 2)
    x = torch.rand(6, 3, 16, 16, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 0, 1, 1, 0])
    d = torch.tensor([0, 0, 1, 1, 2, 2])
    return enc, gen, adapter, x, y, d


def test_criterion_1_total_loss_gradients(report):
    t0 = time.time()
    enc, gen, adapter, x, y, d = _tiny_parts()
    lam_w = 0.7

    enc.zero_grad()
    loss, _ = compute_step_loss(enc, gen, adapter, x, y, d, Toggles(), np.random.default_rng(5), alpha=0.3, lambda_w=lam_w)
    loss.backward()

    # stop-gradient inputs of the weighted branch are constants of the objective
    with torch.no_grad():
        cls0 = enc.forward_plain(x)[0].clone()
        prompts0 = gen.all_prompts().clone()

    def objective():
        mix = mixup_batch(x, y, d, 0.3, np.random.default_rng(5), gen.num_domains)
        w = adapter(cls0)
        ce = F.cross_entropy(enc.forward_prompted(x, weighted_prompt(prompts0, w))[1], y)
        return mixup_loss(enc, gen, mix) + ce + lam_w * weight_supervision(w, d, gen.num_domains)

    groups = {
        "P*": gen.shared, "u": gen.u, "v": gen.v,
        "adapter_fc1": adapter.fc1.weight, "adapter_fc2": adapter.fc2.weight,
        "backbone_qkv": enc.blocks[0].attn.qkv.weight, "patch_embed": enc.patch_embed.weight,
        "head": enc.head[1].weight,
    }
    rng = np.random.default_rng(0)
    eps = 1e-6
    worst = 0.0
    details = []
    for name, p in groups.items():
        flat = p.detach().view(-1)
        idx = rng.choice(flat.numel(), size=min(10, flat.numel()), replace=False)
        num = []
        for i in idx:
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + eps
                up = objective().item()
                flat[i] = orig - eps
                down = objective().item()
                flat[i] = orig
            num.append((up - down) / (2 * eps))
        num = np.array(num)
        auto = p.grad.detach().view(-1)[idx].numpy()
        rel = np.linalg.norm(auto - num) / max(np.linalg.norm(num), 1e-300)
        worst = max(worst, rel)
        details.append(f"{name}={rel:.1e}")
    elapsed = time.time() - t0
    passed = worst < 1e-4 and elapsed < 60
    report(1, "finite-difference gradients", passed, f"max rel err {worst:.2e} ({', '.join(details)}); {elapsed:.1f}s")
    assert passed


# --------------------------------------------------------------------------
# 2. reductions


def _plain_erm_losses(config: TrainConfig, train):
    torch.manual_seed(config.seed)
    enc = ViTEncoder(config.encoder)
    opt = torch.optim.AdamW(enc.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    images = torch.from_numpy(train.chw())
    labels = torch.from_numpy(train.labels)
    losses = []
    for _ in range(config.epochs):
        enc.train()
        order = rng.permutation(len(train))
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            loss = F.cross_entropy(enc(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
    return losses


def test_criterion_2_reductions(report, small_trap):
    enc_cfg = EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2)
    cfg = TrainConfig(encoder=enc_cfg, toggles=Toggles.none(), epochs=3, batch_size=16, lr=1e-3, augment=False, seed=4)
    res = fit(cfg, DatasetBundle.from_trap(small_trap))
    ours = [s["total"] for s in res.history.steps]
    plain = _plain_erm_losses(cfg, small_trap["train"])
    traj_equal = ours == plain

    enc = build_encoder(enc_cfg, seed=1).eval()
    x = torch.rand(4, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    s0_equal = torch.equal(enc.forward_plain(x)[1], enc.forward_prompted(x, torch.zeros(0, 16))[1])

    torch.manual_seed(2)
    gen = PromptGenerator(4, 3, 16)
    onehot_equal = all(
        torch.equal(weighted_prompt(gen, F.one_hot(torch.tensor(m), 4).float()), gen.generate(m)) for m in range(4)
    )
    passed = traj_equal and s0_equal and onehot_equal
    report(2, "reductions", passed, f"ERM trajectory equal over {len(ours)} steps={traj_equal}; s=0 bitwise={s0_equal}; one-hot bitwise={onehot_equal}")
    assert passed


# --------------------------------------------------------------------------
# 3. rank-one generator structure


def test_criterion_3_generator_structure(report):
    worst_minor = 0.0
    for seed in range(10):
        torch.manual_seed(seed)
        gen = PromptGenerator(5, 4, 12).double()
        for m in range(5):
            R = gen.rank_one(m).detach().numpy()
            for (i, k), (j, l) in itertools.product(itertools.combinations(range(R.shape[0]), 2), itertools.combinations(range(R.shape[1]), 2)):
                worst_minor = max(worst_minor, abs(R[i, j] * R[k, l] - R[i, l] * R[k, j]))
    coupling_ok = True
    for m in range(5):
        torch.manual_seed(m)
        gen = PromptGenerator(5, 4, 12).double()
        (gen.generate(m) ** 2).sum().backward()
        others = [t for t in range(5) if t != m]
        coupling_ok &= bool(gen.shared.grad.abs().sum() > 0)
        coupling_ok &= bool(torch.count_nonzero(gen.u.grad[others]) == 0 and torch.count_nonzero(gen.v.grad[others]) == 0)
    passed = worst_minor < 1e-10 and coupling_ok
    report(3, "rank-one generator", passed, f"max |2x2 minor| {worst_minor:.1e}; shared coupling with exact zero cross-domain grads={coupling_ok}")
    assert passed


# --------------------------------------------------------------------------
# 4. metric oracles


def _auc_oracle(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return float(wins / (len(pos) * len(neg)))


def _nmi_oracle(a, b):
    n = len(a)
    ca, cb, cab = {}, {}, {}
    for x, y in zip(a, b):
        ca[x] = ca.get(x, 0) + 1
        cb[y] = cb.get(y, 0) + 1
        cab[(x, y)] = cab.get((x, y), 0) + 1
    ha = -sum(c / n * math.log(c / n) for c in ca.values())
    hb = -sum(c / n * math.log(c / n) for c in cb.values())
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    mi = sum(c / n * math.log(c * n / (ca[x] * cb[y])) for (x, y), c in cab.items())
    return mi / math.sqrt(ha * hb)


def _frechet_oracle(mu_a, cov_a, mu_b, cov_b):
    cross = scipy.linalg.sqrtm(cov_a @ cov_b)
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2 * np.real(cross)))


def test_criterion_4_metric_oracles(report):
    rng = np.random.default_rng(0)
    n_cases = 150
    auc_bad = acc_bad = nmi_bad = fr_bad = 0
    fr_worst = 0.0
    for _ in range(n_cases):
        n = int(rng.integers(2, 25))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 6, n) / 5.0  # coarse grid forces ties
        auc_bad += roc_auc(scores, labels) != _auc_oracle(scores.tolist(), labels.tolist())

        p, q = rng.integers(0, 3, n), rng.integers(0, 3, n)
        acc_bad += accuracy(p, q) != float(Fraction(int(np.sum(p == q)), n))

        a, b = rng.integers(0, 4, n).tolist(), rng.integers(0, 3, n).tolist()
        nmi_bad += abs(nmi(a, b) - _nmi_oracle(a, b)) > 1e-12

        d = int(rng.integers(1, 5))
        A, B = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        cov_a, cov_b = A @ A.T + 0.1 * np.eye(d), B @ B.T + 0.1 * np.eye(d)
        mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
        err = abs(frechet_from_moments(mu_a, cov_a, mu_b, cov_b) - _frechet_oracle(mu_a, cov_a, mu_b, cov_b))
        fr_worst = max(fr_worst, err)
        fr_bad += err > 1e-6
    passed = auc_bad == acc_bad == nmi_bad == fr_bad == 0
    report(
        4, "metric oracles", passed,
        f"{n_cases} instances each; mismatches auc={auc_bad} acc={acc_bad} nmi={nmi_bad} frechet={fr_bad} (max frechet err {fr_worst:.1e})",
    )
    assert passed


# --------------------------------------------------------------------------
# 5. clustering layer analog


def test_criterion_5_cluster_layers(report):
    t0 = time.time()
    runs = [cluster_nmi_experiment(seed) for seed in (0, 1, 2)]
    art1 = np.mean([r.layer1_artifact for r in runs])
    cls1 = np.mean([r.layer1_class for r in runs])
    clsL = np.mean([r.final_class for r in runs])
    stable = [r.layer1_stability for r in runs]
    elapsed = time.time() - t0
    passed = art1 > cls1 and clsL > cls1 and min(stable) > 0.8 and elapsed < 600
    report(
        5, "shallow clusters follow style, deep clusters follow class", passed,
        f"mean over 3 seeds: NMI(L1,artifact)={art1:.3f} NMI(L1,class)={cls1:.3f} NMI(final,class)={clsL:.3f}; "
        f"L1 consecutive-epoch NMI at clustering epoch={['%.3f' % s for s in stable]}; {elapsed:.0f}s",
    )
    assert passed


# --------------------------------------------------------------------------
# 6, 8, 9. trap-set sweep


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    t0 = time.time()
    rows = run_bench(out / "sweep", rhos=(0.0, 0.5, 1.0), seeds=(0, 1, 2), methods={k: METHODS[k] for k in ("ERM", "PLDG")})
    rows += run_bench(out / "ablation", rhos=(1.0,), seeds=(0, 1, 2), methods={"+P": METHODS["+P"]})
    return out, rows, time.time() - t0


def _mean(rows, method, rho):
    return float(np.mean([r["ood_auc"] for r in rows if r["method"] == method and r["rho"] == rho]))


def test_criterion_6_debiasing_direction(report, bench):
    _, rows, elapsed = bench
    erm = {rho: _mean(rows, "ERM", rho) for rho in (0.0, 0.5, 1.0)}
    pldg = {rho: _mean(rows, "PLDG", rho) for rho in (0.0, 0.5, 1.0)}
    margin = pldg[1.0] - erm[1.0]
    erm_drop, pldg_drop = erm[0.0] - erm[1.0], pldg[0.0] - pldg[1.0]
    passed = margin >= 0.03 and erm_drop > pldg_drop
    table = " ".join(f"rho={r:g}: ERM {erm[r]:.3f} PLDG {pldg[r]:.3f};" for r in (0.0, 0.5, 1.0))
    report(
        6, "bias sweep direction", passed,
        f"{table} margin at rho=1 {margin:+.3f} (need >= 0.03); drop ERM {erm_drop:.3f} vs PLDG {pldg_drop:.3f}; sweep {elapsed:.0f}s on 1 core",
    )
    assert passed


def test_criterion_7_distance_weight_relation(report, tmp_path):
    t0 = time.time()
    outcomes = []
    for seed in (0, 1, 2):
        rep, target = distance_weight_experiment(seed, tmp_path)
        ok = rep.spearman is not None and rep.spearman < 0 and rep.argmax_weight == rep.argmin_distance
        outcomes.append((seed, target, rep.spearman, rep.argmax_weight, rep.argmin_distance, ok))
    n_ok = sum(o[-1] for o in outcomes)
    detail = "; ".join(f"seed {s} ({t}): spearman {r:+.2f}, argmax w {a}, argmin d {m}" for s, t, r, a, m, _ in outcomes)
    passed = n_ok >= 2
    report(7, "distance vs prompt weight", passed, f"{n_ok}/3 seeds satisfy both; {detail}; {time.time() - t0:.0f}s")
    assert passed


def test_criterion_8_ablation_order(report, bench):
    _, rows, _ = bench
    base, p, full = _mean(rows, "ERM", 1.0), _mean(rows, "+P", 1.0), _mean(rows, "PLDG", 1.0)
    passed = base <= p <= full
    report(8, "ablation ordering at rho=1", passed, f"baseline {base:.3f} <= +P {p:.3f} <= +P+A+M+G {full:.3f}")
    assert passed


def test_criterion_9_reproducibility(report, bench, tmp_path):
    out, _, _ = bench
    original = out / "sweep" / "rho1" / "seed0"
    checks = []
    for method in ("ERM", "PLDG"):
        sub = _slug(method)
        run_dir = tmp_path / sub
        run_trap(bench_trap(1.0, 0), train_preset("bench", seed=0, toggles=METHODS[method]), run_dir)
        for name in ("metrics.csv", "history.csv"):
            checks.append((f"{sub}/{name}", (run_dir / name).read_bytes() == (original / sub / name).read_bytes()))
    a, b = generate_trap(bench_trap(0.5, 3)), generate_trap(bench_trap(0.5, 3))
    checks.append(("trap data", all(np.array_equal(a[k].images, b[k].images) for k in a)))
    passed = all(ok for _, ok in checks)
    report(9, "reproducibility", passed, ", ".join(f"{n} {'identical' if ok else 'DIFFERS'}" for n, ok in checks))
    assert passed
