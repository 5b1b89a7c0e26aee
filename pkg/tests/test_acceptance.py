"""End-to-end acceptance checks, one test per check.

Checks 01-06 and 10 are exact or tightly toleranced properties and run in
seconds. Checks 07-09 train full continual-learning benchmarks (fifteen runs
plus a determinism rerun) and dominate the suite's runtime; expect well over
an hour on one CPU core. The terminal summary lists every check with its
outcome (see conftest.py).
"""

import math
import warnings

import numpy as np
import pytest
import torch

from bimae.data import TaskStream, synthetic_shapes
from bimae.engine import TrainConfig, run_experiment
from bimae.frequency import freq_mask, ifft_to_real
from bimae.losses import LossWeights, loss_cls, loss_det, loss_rec, total_loss
from bimae.metrics import MetricsLedger, forgetting, last_accuracy
from bimae.model import BilateralMAE, ModelConfig
from bimae.patches import (
    decode_exemplar,
    encode_exemplar,
    kept_patch_count,
    paste_patches,
    sample_mask,
)
from bimae.store import ExemplarStore, inspect_store


# --- 01: storage footprint of the reference exemplar geometry --------------

def test_01_storage_footprint_exact():
    """A 224x224x3 exemplar at mask ratio 0.75 with 16-pixel patches costs
    exactly 49 patches, 37632 payload bytes (36.75 KB), and 98 index bytes."""
    n_patches = (224 // 16) ** 2
    assert kept_patch_count(n_patches, 0.75) == 49

    rng = np.random.default_rng(0)
    image = rng.random((3, 224, 224))
    plan = sample_mask(n_patches, 0.75, rng)
    record = encode_exemplar(image, plan, label=7)
    assert record.n_kept == 49
    assert record.payload_bytes == 37632
    assert record.payload_bytes / 1024 == 36.75
    assert record.index_bytes == 98


# --- 02: codec roundtrips are byte-identical --------------------------------

def test_02_codec_roundtrip_byte_identical():
    """Serialize/parse and decode/re-encode must reproduce records exactly,
    across 1000 random geometries, mask ratios, labels, and images."""
    rng = np.random.default_rng(1)
    geometries = [(16, 2), (16, 4), (32, 2), (32, 4), (32, 8), (48, 4), (64, 8)]
    for trial in range(1000):
        side, patch = geometries[rng.integers(len(geometries))]
        n_patches = (side // patch) ** 2
        ratio = float(rng.uniform(0.0, 0.95))
        image = rng.random((3, side, side))
        plan = sample_mask(n_patches, ratio, rng)
        record = encode_exemplar(image, plan, label=int(rng.integers(0, 2 ** 16)))

        buf = record.to_bytes()
        reparsed, consumed = type(record).from_bytes(buf, 0)
        assert consumed == len(buf)
        assert reparsed.to_bytes() == buf

        # decoding to pixels and re-encoding the pasted image must quantize
        # back to the same bytes (rounding is idempotent on grid values)
        grid, plan_back, label = decode_exemplar(record)
        assert label == record.label
        canvas = paste_patches(np.zeros((3, side, side)), record)
        again = encode_exemplar(canvas, plan_back, label)
        assert again.to_bytes() == buf


# --- 03: analytic gradients match finite differences ------------------------

def _tiny_model():
    config = ModelConfig(image_side=16, patch_side=4, embed_dim=32, heads=2,
                         detailed_mlp_hidden=32, bilateral=True)
    torch.manual_seed(0)
    model = BilateralMAE(config).double()
    model.grow_head(4)
    return model


def test_03_gradients_match_finite_differences():
    """Analytic gradients of all three losses and their weighted sum agree
    with central finite differences within 1e-3 relative, checked in float64
    at 100 random parameter coordinates of a small two-head model."""
    model = _tiny_model()
    data_rng = np.random.default_rng(2)
    x = torch.from_numpy(data_rng.random((2, 3, 16, 16)))
    labels = torch.tensor([1, 3])
    weights = LossWeights(lambda_cls=0.7, lambda_rec=1.3, lambda_det=0.9)

    # the detached reconstruction targets are constants of one training step;
    # freeze them once so the finite-difference surface matches the graph
    x1_t, x2_t = model.mask_and_reconstruct(x, 0.75, 0.4, np.random.default_rng(3))

    def all_losses():
        out = model.forward_train(x, 0.75, np.random.default_rng(4), 0.25)
        l_cls = loss_cls(out.logits, labels)
        l_rec = loss_rec(x, out.x_hat)
        l_det = loss_det(out.pred_spectrum, x1_t, x2_t, 0.25)
        total, _ = total_loss(l_cls, l_rec, l_det, weights)
        return {"cls": l_cls, "rec": l_rec, "det": l_det, "total": total}

    params = [p for p in model.parameters() if p.requires_grad]
    losses = all_losses()
    analytic = {}
    for name, value in losses.items():
        grads = torch.autograd.grad(value, params, retain_graph=True,
                                    allow_unused=True)
        analytic[name] = [g if g is not None else torch.zeros_like(p)
                          for g, p in zip(grads, params)]

    sizes = np.array([p.numel() for p in params])
    bounds = np.cumsum(sizes)
    coord_rng = np.random.default_rng(5)
    coords = coord_rng.choice(int(bounds[-1]), size=100, replace=False)

    h = 1e-4
    for flat_index in coords:
        pi = int(np.searchsorted(bounds, flat_index, side="right"))
        local = int(flat_index - (bounds[pi - 1] if pi else 0))
        param = params[pi]
        original = float(param.data.view(-1)[local])

        probes = {}
        for sign in (+1.0, -1.0):
            with torch.no_grad():
                param.data.view(-1)[local] = original + sign * h
            probes[sign] = {k: float(v.detach()) for k, v in all_losses().items()}
        with torch.no_grad():
            param.data.view(-1)[local] = original

        for name in ("cls", "rec", "det", "total"):
            fd = (probes[+1.0][name] - probes[-1.0][name]) / (2 * h)
            an = float(analytic[name][pi].view(-1)[local])
            tol = max(1e-3 * max(abs(an), abs(fd)), 1e-8)
            assert abs(an - fd) <= tol, (
                f"{name} grad mismatch at param {pi} coord {local}: "
                f"analytic {an:.3e} vs fd {fd:.3e}")


# --- 04: reconstruction targets carry no gradients ---------------------------

def test_04_reconstruction_targets_detached():
    """With only the detail loss active and the detail branch frozen, no
    gradient reaches the deeper encoder blocks; and swapping the targets for
    gradient-tracking recomputations changes no parameter gradient at all."""
    model = _tiny_model()
    for p in model.detail.parameters():
        p.requires_grad_(False)
    x = torch.from_numpy(np.random.default_rng(6).random((2, 3, 16, 16)))
    labels = torch.tensor([0, 2])
    weights = LossWeights(lambda_cls=0.0, lambda_rec=0.0, lambda_det=1.0)

    def detail_only_backward(x1, x2):
        model.zero_grad(set_to_none=True)
        out = model.forward_train(x, 0.75, np.random.default_rng(7), 0.25)
        l_cls = loss_cls(out.logits, labels)
        l_rec = loss_rec(x, out.x_hat)
        l_det = loss_det(out.pred_spectrum, x1, x2, 0.25)
        total, _ = total_loss(l_cls, l_rec, l_det, weights)
        total.backward()
        return {name: (None if p.grad is None else p.grad.clone())
                for name, p in model.named_parameters()}

    x1, x2 = model.mask_and_reconstruct(x, 0.75, 0.4, np.random.default_rng(8))
    grads = detail_only_backward(x1, x2)

    # deeper encoder blocks and their norm feed only the main branch, whose
    # outputs enter this loss solely as detached targets
    for name, p in model.named_parameters():
        if name.startswith("encoder.") and not name.startswith("encoder.0."):
            g = grads[name]
            assert g is None or not g.any(), f"gradient leaked into {name}"
        if name.startswith("encoder_norm."):
            g = grads[name]
            assert g is None or not g.any(), f"gradient leaked into {name}"

    # recompute value-identical targets with autograd enabled: every
    # parameter gradient, decoder included, must be bitwise unchanged
    def tracked_recon(ratio, rng):
        tokens, kept = model.embed_and_mask(x, ratio, rng)
        return model.decode(model.main_branch(model.shared_stem(tokens)), kept)

    model.eval()
    live_rng = np.random.default_rng(8)
    x1_live = tracked_recon(0.75, live_rng)
    x2_live = tracked_recon(0.4, live_rng)
    model.train()
    assert x1_live.requires_grad and x2_live.requires_grad
    assert torch.equal(x1_live.detach(), x1) and torch.equal(x2_live.detach(), x2)
    grads_live = detail_only_backward(x1_live, x2_live)
    for name in grads:
        a, b = grads[name], grads_live[name]
        if a is None and b is None:
            continue
        assert a is not None and b is not None and torch.equal(a, b), (
            f"target path altered gradient of {name}")


# --- 05: frequency-mask properties -------------------------------------------

def test_05_frequency_mask_properties():
    rng = np.random.default_rng(9)
    x = torch.from_numpy(rng.random((2, 3, 32, 32)))

    constant = torch.full((1, 3, 32, 32), 0.6, dtype=torch.float64)
    assert float(freq_mask(constant, 0.25).abs().max()) <= 1e-6

    roundtrip = ifft_to_real(torch.fft.fft2(x))
    assert float((roundtrip - x).abs().max()) <= 1e-6

    # Parseval: spectral energy over H*W equals pixel energy of the
    # band-limited image
    masked = freq_mask(x, 0.25)
    spectral = float((masked.abs() ** 2).sum()) / (32 * 32)
    pixel = float((ifft_to_real(masked) ** 2).sum())
    assert spectral == pytest.approx(pixel, rel=1e-6)

    # the detail loss ignores DC shifts of its reconstruction targets,
    # whether applied to both or to one side only
    model = _tiny_model()
    xt = torch.from_numpy(rng.random((2, 3, 16, 16)))
    with torch.no_grad():
        out = model.forward_train(xt, 0.75, np.random.default_rng(10), 0.25)
    x1, x2 = model.mask_and_reconstruct(xt, 0.75, 0.4, np.random.default_rng(11))
    base = float(loss_det(out.pred_spectrum, x1, x2, 0.25))
    both = float(loss_det(out.pred_spectrum, x1 + 0.37, x2 + 0.37, 0.25))
    one = float(loss_det(out.pred_spectrum, x1, x2 + 0.37, 0.25))
    assert both == pytest.approx(base, rel=1e-9, abs=1e-12)
    assert one == pytest.approx(base, rel=1e-9, abs=1e-12)


# --- 06: masking multiplies exemplar capacity --------------------------------

def test_06_exemplar_multiplier(tmp_path):
    """At one byte budget, storing quarter-size records (r=0.75) holds exactly
    four times as many exemplars as full records (r=0)."""
    budget = 61440
    rng = np.random.default_rng(12)
    candidates = rng.random((100, 3, 32, 32)).astype(np.float32)

    counts = {}
    for ratio, name in ((0.0, "full.bmst"), (0.75, "quarter.bmst")):
        store = ExemplarStore(budget, 32, 4, channels=3, seed=0)
        store.admit_class(0, candidates, ratio)
        store.save(tmp_path / name)
        report = inspect_store(tmp_path / name)
        assert report["valid"]
        assert report["used_bytes"] == budget
        counts[ratio] = report["entry_count"]
        expected_multiplier = 1.0 if ratio == 0.0 else 4.0
        assert report["multiplier"] == expected_multiplier

    assert counts[0.75] == 4 * counts[0.0] == 80


# --- toy continual benchmark (backs checks 07, 08, 09) -----------------------

BENCH_SEEDS = (0, 1, 2, 3, 4)
# byte cost of 20 full 32x32 RGB uint8 images for each of the 10 classes
BENCH_BUDGET = 10 * 20 * 3 * 32 * 32


def _bench_stream():
    train_x, train_y = synthetic_shapes(30, image_side=32, seed=1234)
    test_x, test_y = synthetic_shapes(10, image_side=32, seed=4321)
    return TaskStream(train_x, train_y, test_x, test_y, n_tasks=5,
                      class_order_seed=0)


def _bench_run(bilateral: bool, seed: int, budget: int) -> MetricsLedger:
    model_config = ModelConfig(image_side=32, patch_side=2, embed_dim=64,
                               heads=4, detailed_mlp_hidden=128,
                               bilateral=bilateral)
    train_config = TrainConfig(epochs=20, batch_size=32, base_lr=1.5e-3,
                               seed=seed, augment=False, r2=0.0,
                               weights=LossWeights(lambda_cls=1.0))
    with warnings.catch_warnings():
        # the budget allows more exemplars per class than the dataset has
        warnings.filterwarnings("ignore", message="quota")
        return run_experiment(_bench_stream(), model_config, train_config, budget)


@pytest.fixture(scope="session")
def benchmark_runs():
    runs = {}
    for seed in BENCH_SEEDS:
        for arm, bilateral, budget in (("replay", True, BENCH_BUDGET),
                                       ("no_replay", True, 0),
                                       ("main_only", False, BENCH_BUDGET)):
            ledger = _bench_run(bilateral, seed, budget)
            runs[arm, seed] = ledger
            mse = float(np.median(ledger.replay_mse)) if ledger.replay_mse else math.nan
            print(f"[bench] {arm} seed={seed}: last={last_accuracy(ledger):.3f} "
                  f"forgetting={forgetting(ledger):.3f} replay_mse={mse:.5f}",
                  flush=True)
    return runs


def _median_over_seeds(runs, arm, metric):
    return float(np.median([metric(runs[arm, s]) for s in BENCH_SEEDS]))


@pytest.mark.benchmark
def test_07_replay_beats_zero_budget(benchmark_runs):
    """Median over seeds: exemplar replay must beat the zero-budget ablation
    by at least ten points on both forgetting and final accuracy."""
    f_replay = _median_over_seeds(benchmark_runs, "replay", forgetting)
    f_none = _median_over_seeds(benchmark_runs, "no_replay", forgetting)
    last_replay = _median_over_seeds(benchmark_runs, "replay", last_accuracy)
    last_none = _median_over_seeds(benchmark_runs, "no_replay", last_accuracy)
    assert f_replay <= f_none - 0.10, (
        f"forgetting {f_replay:.3f} vs {f_none:.3f} without replay")
    assert last_replay >= last_none + 0.10, (
        f"last accuracy {last_replay:.3f} vs {last_none:.3f} without replay")


@pytest.mark.benchmark
def test_08_detail_branch_improves_replay(benchmark_runs):
    """Median over seeds: the two-branch model must not lose more than one
    point of final accuracy versus the main branch alone, and must cut the
    median replay reconstruction error by at least five percent."""
    last_two = _median_over_seeds(benchmark_runs, "replay", last_accuracy)
    last_main = _median_over_seeds(benchmark_runs, "main_only", last_accuracy)
    mse_two = _median_over_seeds(
        benchmark_runs, "replay", lambda lg: float(np.median(lg.replay_mse)))
    mse_main = _median_over_seeds(
        benchmark_runs, "main_only", lambda lg: float(np.median(lg.replay_mse)))
    assert last_two >= last_main - 0.01, (
        f"last accuracy {last_two:.3f} vs {last_main:.3f} main-only")
    assert mse_two <= 0.95 * mse_main, (
        f"replay mse {mse_two:.5f} vs {mse_main:.5f} main-only "
        f"({100 * (1 - mse_two / max(mse_main, 1e-12)):.1f}% improvement)")


@pytest.mark.benchmark
def test_09_benchmark_is_deterministic(benchmark_runs):
    """Re-running one benchmark configuration reproduces the accuracy matrix
    bit for bit."""
    first = benchmark_runs["replay", BENCH_SEEDS[0]]
    again = _bench_run(True, BENCH_SEEDS[0], BENCH_BUDGET)
    assert len(first.acc) == len(again.acc)
    for row_a, row_b in zip(first.acc, again.acc):
        assert row_a == row_b


# --- 10: forgetting metric against a brute-force oracle ----------------------

def test_10_forgetting_matches_brute_force():
    rng = np.random.default_rng(13)
    for _ in range(20):
        n_tasks = int(rng.integers(2, 9))
        rows = [[float(a) for a in rng.random(t + 1)] for t in range(n_tasks)]

        ledger = MetricsLedger()
        for t, row in enumerate(rows):
            ledger.add_task_row(row, [10] * (t + 1))

        drops = []
        for k in range(n_tasks - 1):
            best = rows[k][k]
            for t in range(k, n_tasks):
                if rows[t][k] > best:
                    best = rows[t][k]
            drops.append(best - rows[n_tasks - 1][k])
        assert forgetting(ledger) == float(np.mean(drops))
