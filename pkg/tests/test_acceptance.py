"""Headline acceptance checks, one test per criterion.

Each test records ``criterion`` and ``measured`` properties; the conftest
prints one PASS/FAIL line per criterion at the end of the run.
"""
import itertools
import math
import struct
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch

from belmil.bags import FeatureBag, decode_bag, encode_bag, load_bag
from belmil.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from belmil.encoder import EncoderConfig, TransMIL, exact_attention, extract_attention, nystrom_attention
from belmil.loss import LossConfig, PrototypeBank, bel
from belmil.metrics import PredictionSet, average_precision, binary_auroc, macro_f1
from belmil.optim import Lookahead, RAdam
from belmil.preprocess import extract_patches, otsu_threshold, preprocess_image
from belmil.training import TrainConfig, TrainingSession, build_optimizer
from fdcheck import gradient_check

DATA = Path(__file__).parent / "data"


def record(record_property, criterion, measured):
    record_property("criterion", criterion)
    record_property("measured", measured)


# --- bag embedding loss ------------------------------------------------------


def bel_direct(b, protos, c, m):
    """Direct evaluation: 1/2 (1 - S_c) + 1 / (2 (|C| - 1)) * sum_{c' != c} max(0, S_c' - m)."""
    def cos(u, v):
        return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))

    k = len(protos)
    push = sum(max(0.0, cos(b, protos[j]) - m) for j in range(k) if j != c)
    return 0.5 * (1 - cos(b, protos[c])) + push / (2 * (k - 1))


def test_bel_oracle_equivalence(record_property):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        d = int(rng.integers(2, 33))
        protos = rng.standard_normal((k, d)) * rng.uniform(0.1, 10)
        b = rng.standard_normal(d) * rng.uniform(0.1, 10)
        c, m = int(rng.integers(k)), float(rng.uniform(0, 0.9))
        bank = PrototypeBank(k)
        for j in range(k):
            bank.update(j, torch.from_numpy(protos[j]), 0.996)
        got = bel(torch.from_numpy(b), c, bank, LossConfig(margin=m)).item()
        worst = max(worst, abs(got - bel_direct(b, protos, c, m)))
    elapsed = time.perf_counter() - start
    record(record_property, "BEL oracle equivalence (1000 cases, 1e-6, <5 s)",
           f"max |diff| {worst:.2e}, {elapsed:.2f} s")
    assert worst < 1e-6
    assert elapsed < 5


def test_bel_warmup(record_property):
    session = TrainingSession(TrainConfig(seed=0, encoder=dict(dim=16, heads=2, depth=1)), 6, 4)
    g = torch.Generator().manual_seed(1)
    labels = [0, 1, 2, 3] + [int(c) for c in torch.randint(0, 4, (8,), generator=g)]
    bels = [session.step(torch.randn(5, 6, generator=g), c)["bel"] for c in labels]
    record(record_property, "Warm-up: first |C|=4 distinct-class iterations BEL exactly 0, then > 0",
           f"BEL[0:4]={bels[:4]}, min BEL[4:]={min(bels[4:]):.3g}")
    assert bels[:4] == [0.0, 0.0, 0.0, 0.0]
    assert all(v > 0 for v in bels[4:])


@pytest.mark.parametrize("lam", [0.5, 0.996])
def test_ema_law(record_property, lam):
    rng = np.random.default_rng(5)
    b0, target = rng.standard_normal(12), rng.standard_normal(12)
    bank = PrototypeBank(2)
    bank.update(0, torch.from_numpy(b0), lam)
    bank.update(1, torch.from_numpy(rng.standard_normal(12)), lam)
    for _ in range(10):
        bank.update(0, torch.from_numpy(target), lam)
    got = float(np.linalg.norm(bank[0].numpy() - target))
    want = lam**10 * float(np.linalg.norm(b0 - target))
    record(record_property, f"EMA law (k=10, lambda={lam}, 1e-6)", f"|diff| {abs(got - want):.2e}")
    assert abs(got - want) < 1e-6


# --- gradients -----------------------------------------------------------------


def test_gradient_fidelity(record_property):
    cfg = EncoderConfig(input_dim=16, dim=32, depth=2, heads=4, n_classes=3, attention="exact", attn_dropout=0.0)
    start = time.perf_counter()
    with_bel, errs_bel = gradient_check(cfg, n_instances=8, use_bel=True, h=1e-3)
    without_bel, errs_ce = gradient_check(cfg, n_instances=8, use_bel=False, h=1e-3)
    elapsed = time.perf_counter() - start
    record(record_property, "Gradient fidelity (N=8, H=16, D=32, 2 blocks, |C|=3, h=1e-3, <1e-4, <60 s)",
           f"worst rel err BEL {with_bel:.2e} / CE-only {without_bel:.2e}, {elapsed:.1f} s")
    assert with_bel < 1e-4, errs_bel
    assert without_bel < 1e-4, errs_ce
    assert elapsed < 60


# --- attention ------------------------------------------------------------------


def smooth_sequence(s, d, gen):
    t = torch.linspace(0, 1, s, dtype=torch.float64)[:, None]
    freq = torch.rand(1, d, generator=gen, dtype=torch.float64)
    phase = torch.rand(1, d, generator=gen, dtype=torch.float64) * 2 * math.pi
    return torch.sin(2 * math.pi * freq * t + phase)


def test_nystrom_fidelity(record_property):
    g = torch.Generator().manual_seed(0)
    full_out = full_row = 0.0
    for n in (1, 2, 3, 5, 8, 13, 16, 24, 32):
        for _ in range(5):
            q, k, v = (torch.randn(4, n, 16, generator=g) for _ in range(3))
            exact, attn = exact_attention(q, k, v, 16**-0.5)
            approx, factors = nystrom_attention(q, k, v, n, 16**-0.5)
            full_out = max(full_out, (approx - exact).abs().max().item())
            if n > 1:
                row = (extract_attention(factors, "nystrom") - extract_attention(attn, "exact")).abs().max()
                full_row = max(full_row, row.item())
    quarter = 0.0
    for _ in range(20):
        q, k, v = (smooth_sequence(32, 8, g) for _ in range(3))
        exact, _ = exact_attention(q, k, v, 8**-0.5)
        approx, _ = nystrom_attention(q, k, v, 8, 8**-0.5)
        quarter = max(quarter, (approx - exact).abs().max().item())
    record(record_property, "Nystrom fidelity (m_L=N<=32: 1e-3; m_L=N/4 smooth: 1e-1)",
           f"m_L=N out {full_out:.1e} row {full_row:.1e}; m_L=N/4 {quarter:.1e}")
    assert full_out < 1e-3 and full_row < 1e-3
    assert quarter < 1e-1


def test_attention_contract(record_property):
    g = torch.Generator().manual_seed(3)
    worst_sum, min_alpha = 0.0, 1.0
    for mode in ("exact", "nystrom"):
        model = TransMIL(EncoderConfig(input_dim=32, dim=64, heads=8, landmarks=16, n_classes=3, attention=mode),
                         seed=1).eval()
        for _ in range(100):
            n = int(torch.randint(1, 200, (1,), generator=g))
            alpha = model(torch.randn(n, 32, generator=g)).alpha
            assert alpha.shape == (n,)
            worst_sum = max(worst_sum, abs(alpha.sum().item() - 1))
            min_alpha = min(min_alpha, alpha.min().item())
    record(record_property, "Attention contract (100 bags x 2 modes: sum 1 +- 1e-5, alpha >= 0)",
           f"max |sum-1| {worst_sum:.1e}, min alpha {min_alpha:.2e}")
    assert worst_sum <= 1e-5 and min_alpha >= 0


def test_permutation_invariance(record_property):
    model = TransMIL(EncoderConfig(input_dim=32, dim=64, heads=8, n_classes=3, attention="exact"), seed=2).eval()
    g = torch.Generator().manual_seed(4)
    x = torch.randn(60, 32, generator=g)
    base = model(x)
    worst = 0.0
    for _ in range(20):
        out = model(x[torch.randperm(60, generator=g)])
        worst = max(worst, (out.p - base.p).abs().max().item(), (out.b - base.b).abs().max().item())
    record(record_property, "Permutation invariance (exact, eval, 20 permutations, 1e-6)", f"max diff {worst:.1e}")
    assert worst <= 1e-6


# --- synthetic ablation -----------------------------------------------------------


def test_synthetic_ablation(record_property, synthetic_ablation):
    with_bel = synthetic_ablation[True].test_metrics[0].accuracy
    without = synthetic_ablation[False].test_metrics[0].accuracy
    sim = synthetic_ablation[True].reports[0].final_max_prototype_similarity
    margin = LossConfig().margin
    seconds = synthetic_ablation["seconds"]
    record(record_property, "Synthetic ablation (BEL acc >= 0.90, >= no-BEL - 0.02, max proto cos <= m + 0.15, <10 min)",
           f"BEL {with_bel:.3f}, no-BEL {without:.3f}, max cos {sim:.3f}, {seconds:.0f} s")
    assert with_bel >= 0.90
    assert with_bel >= without - 0.02
    assert sim <= margin + 0.15
    assert seconds < 600


# --- optimizer ------------------------------------------------------------------


def test_optimizer_correctness(record_property):
    lr, wd, b1, b2, eps = 2e-5, 5e-5, 0.9, 0.999, 1e-8
    grads = [1.0, 0.5, -0.25, 2.0, -1.5, 0.75, 0.1, -0.6, 1.2, -0.05]
    theta = 0.4
    m = v = 0.0
    rho_inf = 2 / (1 - b2) - 1
    expected = []
    for t, gval in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * gval
        v = b2 * v + (1 - b2) * gval**2
        theta *= 1 - lr * wd
        rho = rho_inf - 2 * t * b2**t / (1 - b2**t)
        step = m / (1 - b1**t)
        if rho > 4:
            r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            step = r * step / (math.sqrt(v / (1 - b2**t)) + eps)
        theta -= lr * step
        expected.append(theta)
    p = torch.nn.Parameter(torch.tensor([0.4], dtype=torch.float64))
    opt = RAdam([p])
    worst = 0.0
    for gval, want in zip(grads, expected):
        p.grad = torch.tensor([gval], dtype=torch.float64)
        opt.step()
        worst = max(worst, abs(p.item() - want))

    class Scripted:
        def __init__(self, param, values):
            self.param_groups = [{"params": [param]}]
            self.state, self.values, self.param = {}, iter(values), param

        def step(self):
            with torch.no_grad():
                self.param.fill_(next(self.values))

        def zero_grad(self, set_to_none=True):
            pass

    fast_values = [1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0]
    q = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    la = Lookahead(Scripted(q, fast_values), k=5, alpha=0.5)
    slow_trace = []
    for _ in fast_values:
        la.step()
        slow_trace.append(la.slow[0].item())
    # slow: 0 -> 0 + 0.5 (5 - 0) = 2.5 -> 2.5 + 0.5 (0 - 2.5) = 1.25
    lookahead_ok = slow_trace[4] == 2.5 and slow_trace[9] == 1.25 and q.item() == 1.25
    record(record_property, "Optimizer (RAdam 10 scalar steps 1e-7; Lookahead scripted interpolation exact)",
           f"RAdam max |diff| {worst:.1e}; lookahead slow {slow_trace[4]}, {slow_trace[9]}")
    assert worst < 1e-7
    assert lookahead_ok


# --- metrics ------------------------------------------------------------------------


def test_metrics_oracles(record_property):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(4, 80))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = np.round(rng.random(n), 2)
        pos = [s for s, y in zip(scores, labels) if y]
        neg = [s for s, y in zip(scores, labels) if not y]
        pairs = sum((a > b) + 0.5 * (a == b) for a, b in itertools.product(pos, neg))
        worst = max(worst, abs(binary_auroc(scores, labels) - pairs / (len(pos) * len(neg))))
    # hand-computed step curves: precision at each recall increment
    curves = [
        (([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]), 0.25),
        (([0.9, 0.8, 0.7, 0.6, 0.5], [1, 0, 1, 0, 1]), (1 + 2 / 3 + 3 / 5) / 3),
        (([0.8, 0.8, 0.3, 0.2], [1, 0, 1, 0]), 0.5 * 0.5 + 0.5 * 2 / 3),
    ]
    pr_diffs = [abs(average_precision(s, y) - want) for (s, y), want in curves]
    # confusion [[2, 1, 0], [0, 3, 1], [1, 0, 2]] -> per-class F1 from TP, FP, FN
    labels = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2]
    predicted = [0, 0, 1, 1, 1, 1, 2, 0, 2, 2]
    probs = np.eye(3)[predicted]
    tp, fp, fn = (2, 3, 2), (1, 1, 1), (1, 1, 1)
    f1_hand = sum(2 * a / (2 * a + b + c) for a, b, c in zip(tp, fp, fn)) / 3
    f1_diff = abs(macro_f1(PredictionSet([str(i) for i in range(10)], labels, probs)) - f1_hand)
    record(record_property, "Metrics oracles (AUROC vs pairwise 1e-10; 3 PR curves; macro-F1 arithmetic)",
           f"AUROC {worst:.1e}; PR {max(pr_diffs):.1e}; F1 {f1_diff:.1e}")
    assert worst < 1e-10
    assert max(pr_diffs) < 1e-12
    assert f1_diff < 1e-12


# --- preprocessing ---------------------------------------------------------------------


def exhaustive_otsu_cut(hist):
    """Exact argmax over cuts of w0 * w1 * (mu0 - mu1)^2, lowest cut on ties."""
    best_k, best = None, Fraction(-1)
    for k in range(len(hist) - 1):
        w0, w1 = sum(hist[: k + 1]), sum(hist[k + 1:])
        if w0 == 0 or w1 == 0:
            continue
        # bin centres are (2i + 1) / 512; the common factor does not move the argmax
        mu0 = Fraction(sum(h * (2 * i + 1) for i, h in enumerate(hist[: k + 1])), w0)
        mu1 = Fraction(sum(h * (2 * i + 1) for i, h in enumerate(hist[k + 1:], start=k + 1)), w1)
        var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best:
            best_k, best = k, var
    return best_k


def test_preprocessing(record_property):
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(100):
        hist = [0] * 256
        for _ in range(int(rng.integers(2, 6))):
            lo = int(rng.integers(0, 250))
            for i in range(lo, min(256, lo + int(rng.integers(1, 40)))):
                hist[i] += int(rng.integers(0, 30))
        if sum(1 for h in hist if h) < 2:
            hist[0] += 1
            hist[255] += 1
        field = np.repeat((np.arange(256) + 0.5) / 256, hist)
        rng.shuffle(field)
        threshold, mask = otsu_threshold(field)
        k = exhaustive_otsu_cut(hist)
        if threshold != (k + 1) / 256 or not np.array_equal(mask, field > (k + 1) / 256):
            mismatches += 1
    tile = np.zeros((100, 100), dtype=bool)
    tile.flat[:4900] = True
    kept_49 = len(extract_patches(tile, 100, 0.5).kept)
    tile.flat[:5000] = True
    kept_50 = len(extract_patches(tile, 100, 0.5).kept)
    image = np.zeros((1024, 1024, 3))
    image[..., 0] = 0.8
    image[..., 1] = 0.2
    image[..., 2] = 0.6
    image[:, :1, :] = 0.5  # a gray column gives the histogram its background mode
    full = len(preprocess_image(image, 512, 0.5).kept)
    record(record_property, "Preprocessing (Otsu vs exhaustive on 100 histograms; 49%/50% boundary; 1024^2 -> 4)",
           f"Otsu mismatches {mismatches}; 49% kept {kept_49}, 50% kept {kept_50}; patches {full}")
    assert mismatches == 0
    assert (kept_49, kept_50) == (0, 1)
    assert full == 4


# --- formats --------------------------------------------------------------------------


def test_format_stability(record_property, tmp_path):
    rng = np.random.default_rng(13)
    bag_ok = True
    for n, h in ((1, 1), (7, 3), (150, 32)):
        x = rng.standard_normal((n, h)).astype(np.float32)
        buf = encode_bag(x)
        bag_ok &= decode_bag(buf).tobytes() == x.tobytes() and encode_bag(decode_bag(buf)) == buf
        bag = FeatureBag("b", "p", 0, x)
        bag_ok &= bag == FeatureBag("b", "p", 0, decode_bag(buf))

    session = TrainingSession(TrainConfig(seed=3, lr=1e-3, encoder=dict(dim=16, heads=2, landmarks=4)), 5, 3)
    g = torch.Generator().manual_seed(0)
    for i in range(7):
        session.step(torch.randn(6, 5, generator=g), i % 3)
    path = tmp_path / "ck.milt"
    save_checkpoint(path, session.model, session.bank, session.optimizer, meta={"k": 1})
    model, bank, opt, _ = load_checkpoint(path, optimizer_factory=lambda m: build_optimizer(m, session.config))
    save_checkpoint(tmp_path / "again.milt", model, bank, opt, meta={"k": 1})
    ck_ok = path.read_bytes() == (tmp_path / "again.milt").read_bytes()
    _, tensors = decode_checkpoint(path.read_bytes())
    ck_ok &= all(torch.equal(tensors[n], p) for n, p in session.model.named_parameters())
    ck_ok &= encode_checkpoint(*decode_checkpoint(path.read_bytes())) == path.read_bytes()

    raw = (DATA / "golden_3x4.milb").read_bytes()
    committed = struct.unpack("<12f", raw[16:])
    expected = [1.0, -2.5, 0.125, 3.0e-3, -0.0, 65504.0, 1.5, -7.75, 2.0**-20, 42.0, -1.0e6, 0.1]
    golden = load_bag(DATA / "golden_3x4.milb").features
    golden_ok = raw[:16] == b"MILB" + struct.pack("<III", 1, 3, 4)
    golden_ok &= golden.tobytes() == np.array(expected, dtype=np.float32).reshape(3, 4).tobytes()
    golden_ok &= list(committed) == [float(np.float32(e)) for e in expected]
    record(record_property, "Format stability (bag and checkpoint bit-exact round trips; golden bag)",
           f"bags {bag_ok}, checkpoint {ck_ok}, golden {golden_ok}")
    assert bag_ok and ck_ok and golden_ok
