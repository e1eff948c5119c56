"""Acceptance gate. Each test prints one PASS/FAIL line, repeated in the terminal summary.

Criterion 5 trains 3 seeds x 2 objectives at full toy scale, so this module
takes roughly half an hour on one core. Criteria 6 and 7 reuse those runs.
"""

import itertools
import time

import numpy as np
import pytest

from symcorr.cli import main as cli_main
from symcorr.evaluation import assign_modes, evaluate, inference_path_for
from symcorr.inference import extract_modes
from symcorr.losses import (ContrastiveConfig, TargetConfig, cross_entropy, gmm_target, mmgsd_loss_from_descriptors,
                            pcl_loss, sample_contrastive_pairs, softmax_heatmap)
from symcorr.model import DescriptorNet, ModelConfig
from symcorr.synthgen import MeshConfig, generate_dataset, load_dataset, make_pair
from symcorr.train import TrainConfig, train

from helpers import rel_error, verdict

SEEDS = (0, 1, 2)
TOY_MESH = MeshConfig(kind="rope", vertex_count=32, image_size=(64, 64))

# Central-difference step and the gradient magnitude below which errors are measured
# absolutely: float64 round-off in a loss of size ~4 is ~1e-10 at this step, and
# several gradients (e.g. the last bias under MMGSD) are exactly zero.
FD_STEP = 1e-5
GRAD_FLOOR = 1e-6


# ------------------------------------------------------------------ 1


def _np_conv(x, w, b):
    n, h, wd, c = x.shape
    k = w.shape[0]
    xp = np.pad(x, ((0, 0), (k // 2, k // 2), (k // 2, k // 2), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return (win.reshape(n * h * wd, k * k * c) @ w.reshape(-1, w.shape[-1]) + b).reshape(n, h, wd, -1)


class NumpyOracle:
    """Graph-free re-implementation of the network and the three losses, used for finite differences.

    Caches each layer's input so perturbing a weight of layer L only reruns
    layers L and up.
    """

    def __init__(self, net, pair, margin=0.5):
        self.ws = [net.params[f"conv{i}.weight"].data for i in range(net.num_layers)]
        self.bs = [net.params[f"conv{i}.bias"].data for i in range(net.num_layers)]
        self.x = np.repeat(np.stack([pair.image_a, pair.image_b])[..., None], 3, axis=-1)
        self.margin = margin
        self.refresh()

    def refresh(self):
        self.inputs = [self.x]
        for i in range(len(self.ws) - 1):
            self.inputs.append(np.maximum(_np_conv(self.inputs[-1], self.ws[i], self.bs[i]), 0.0))

    def descriptors(self, start=0):
        h = self.inputs[start]
        for i in range(start, len(self.ws)):
            h = _np_conv(h, self.ws[i], self.bs[i])
            if i < len(self.ws) - 1:
                h = np.maximum(h, 0.0)
        return h

    def contrastive(self, d, matches, nonmatches):
        da, db = d[0][matches[:, 0], matches[:, 1]], d[1][matches[:, 2], matches[:, 3]]
        na, nb = d[0][nonmatches[:, 0], nonmatches[:, 1]], d[1][nonmatches[:, 2], nonmatches[:, 3]]
        hinge = np.maximum(self.margin - np.sqrt(((na - nb) ** 2).sum(-1)), 0.0)
        return ((da - db) ** 2).sum(-1).mean() + (hinge ** 2).mean()

    @staticmethod
    def distributional(d, src, targets):
        a = d[0][src[:, 0], src[:, 1]]
        b = d[1].reshape(-1, d.shape[-1])
        logits = -((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        mx = logits.max(axis=1, keepdims=True)
        logp = logits - mx - np.log(np.exp(logits - mx).sum(axis=1, keepdims=True))
        return -(targets * logp).sum(axis=1).mean()


def _losses(net, pair):
    """(autodiff loss builder, oracle loss of a descriptor volume) per objective, with frozen samples."""
    rng = np.random.default_rng(11)
    cfg = ContrastiveConfig()
    pcl_m, pcl_n = sample_contrastive_pairs(pair, rng, cfg, symmetric=False)
    sp_m, sp_n = sample_contrastive_pairs(pair, rng, cfg, symmetric=True)
    vids = list(range(len(pair.entries)))
    src = np.array([e.src for e in pair.entries])
    h, w = pair.image_b.shape
    gmm_target_batch = np.stack([gmm_target(e.dsts, 1.0, h, w).ravel() for e in pair.entries])
    images = np.stack([pair.image_a, pair.image_b])
    oracle = NumpyOracle(net, pair, cfg.margin)

    def graph(fn):
        def build():
            d = net.forward(images)
            return fn(d[0], d[1])
        return build

    return oracle, {
        "pcl": (graph(lambda a, b: pcl_loss(a, b, pcl_m, pcl_n, cfg)), lambda d: oracle.contrastive(d, pcl_m, pcl_n)),
        "spcl": (graph(lambda a, b: pcl_loss(a, b, sp_m, sp_n, cfg)), lambda d: oracle.contrastive(d, sp_m, sp_n)),
        "mmgsd": (graph(lambda a, b: mmgsd_loss_from_descriptors(a, b, pair, vids, TargetConfig())),
                  lambda d: oracle.distributional(d, src, gmm_target_batch)),
    }


def _fd_gradients(oracle, loss_of, h):
    grads = []
    for layer in range(len(oracle.ws)):
        for arr in (oracle.ws[layer], oracle.bs[layer]):
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = loss_of(oracle.descriptors(layer))
                flat[i] = old - h
                fm = loss_of(oracle.descriptors(layer))
                flat[i] = old
                gflat[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    mesh = MeshConfig(kind="rope", vertex_count=8, image_size=(16, 16), rope_thickness=2, rope_length_frac=1.0)
    pair = make_pair(mesh, seed=3, pair_id=0)
    net = DescriptorNet(ModelConfig(image_size=(16, 16)), seed=0)
    assert net.num_layers == 4
    oracle, losses = _losses(net, pair)
    worst = {}
    for name, (build, loss_of) in losses.items():
        for p in net.parameters():
            p.grad = None
        loss = build()
        assert loss.item() == pytest.approx(loss_of(oracle.descriptors()), rel=1e-12)
        loss.backward()
        analytic = [p.grad for p in net.parameters()]
        numeric = _fd_gradients(oracle, loss_of, FD_STEP)
        worst[name] = max(float(rel_error(a, n, floor=GRAD_FLOOR).max()) for a, n in zip(analytic, numeric))
    elapsed = time.perf_counter() - t0
    n_weights = sum(p.data.size for p in net.parameters())
    ok = all(v <= 1e-4 for v in worst.values()) and elapsed <= 60
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    line = verdict(1, "gradient fidelity", ok, f"{detail}; {n_weights} weights each; {elapsed:.1f} s")
    assert ok, line


# ------------------------------------------------------------------ 2


def test_criterion_2_normalization_suite():
    rng = np.random.default_rng(2)
    worst_sum, min_entry, worst_ce = 0.0, np.inf, 0.0
    for _ in range(1000):
        h, w = rng.integers(4, 65, 2)
        k = int(rng.integers(1, 5))
        modes = rng.uniform([0, 0], [h - 1, w - 1], (k, 2))
        g = gmm_target(modes, float(rng.uniform(0.3, 5.0)), int(h), int(w))
        d = int(rng.integers(2, 9))
        a = rng.standard_normal((int(h), int(w), d)) * rng.uniform(0.1, 10)
        b = rng.standard_normal((int(h), int(w), d)) * rng.uniform(0.1, 10)
        s = softmax_heatmap(a, (int(rng.integers(h)), int(rng.integers(w))), b)
        for grid in (g, s):
            worst_sum = max(worst_sum, abs(grid.sum() - 1.0))
            min_entry = min(min_entry, grid.min())
        uniform = np.full((h, w), 1.0 / (h * w))
        worst_ce = max(worst_ce, abs(cross_entropy(g, uniform) - np.log(h * w)))
    ok = worst_sum <= 1e-9 and min_entry >= 0 and worst_ce <= 1e-9
    line = verdict(2, "normalization", ok,
                   f"max |sum-1| {worst_sum:.1e}, min entry {min_entry:.1e}, max |CE-log HW| {worst_ce:.1e}")
    assert ok, line


# ------------------------------------------------------------------ 3


def test_criterion_3_mode_recovery():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for n in (2, 4):
        for _ in range(50):
            while True:
                pts = rng.uniform(0, 31, (n, 2))
                dist = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
                if np.all(dist[np.triu_indices(n, 1)] >= 6.0):
                    break
            ms = extract_modes(gmm_target(pts, 1.0, 32, 32), n, sigma=1.0)
            perm, _ = assign_modes(ms.means, pts)
            worst = max(worst, float(np.linalg.norm(ms.means - pts[list(perm)], axis=1).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.5 and elapsed <= 30
    line = verdict(3, "mode recovery", ok, f"worst mode error {worst:.2e} px over 100 grids; {elapsed:.1f} s")
    assert ok, line


# ------------------------------------------------------------------ 4


def test_criterion_4_assignment_oracle():
    rng = np.random.default_rng(4)
    mismatches = 0
    for i in range(200):
        n = 1 + i % 4
        p, t = rng.uniform(0, 64, (n, 2)), rng.uniform(0, 64, (n, 2))
        best = np.inf
        for perm in itertools.permutations(range(n)):
            c = 0.0
            for a, b in enumerate(perm):
                c += float(((p[a] - t[b]) ** 2).sum())
            best = min(best, c)
        _, cost = assign_modes(p, t)
        mismatches += cost != best
    ok = mismatches == 0
    line = verdict(4, "assignment oracle", ok, f"{200 - mismatches}/200 instances equal the exhaustive minimum")
    assert ok, line


# ------------------------------------------------------------------ 5-7


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    """Train MMGSD and SPCL on the same data, model init and optimizer budget for each seed."""
    runs = {}
    for seed in SEEDS:
        ds_root = tmp_path_factory.mktemp(f"rope{seed}")
        generate_dataset(ds_root, TOY_MESH, 200, 50, seed=seed)
        ds = load_dataset(ds_root)
        train_pairs, test_pairs = ds.load_split("train"), ds.load_split("test")
        for loss in ("mmgsd", "spcl"):
            net = DescriptorNet(ModelConfig(), seed=seed)
            t0 = time.perf_counter()
            result = train(net, train_pairs, TrainConfig(loss=loss, epochs=30, seed=seed))
            elapsed = time.perf_counter() - t0
            report = evaluate(net, test_pairs, inference_path_for(loss), method=loss)
            runs[seed, loss] = {"net": net, "result": result, "seconds": elapsed, "report": report,
                                "test": test_pairs}
    return runs


def test_criterion_5_toy_training(toy_runs):
    ratios = [toy_runs[s, "mmgsd"]["result"].final_loss / toy_runs[s, "mmgsd"]["result"].initial_loss
              for s in SEEDS]
    rmse = {loss: [toy_runs[s, loss]["report"].rmse for s in SEEDS] for loss in ("mmgsd", "spcl")}
    slowest = max(r["seconds"] for r in toy_runs.values())
    mean_m, mean_s = float(np.mean(rmse["mmgsd"])), float(np.mean(rmse["spcl"]))
    ok = all(r <= 0.5 for r in ratios) and mean_m < mean_s and slowest <= 600
    detail = (f"MMGSD final/initial loss {', '.join(f'{r:.3f}' for r in ratios)}; "
              f"mean RMSE MMGSD {mean_m:.2f} px vs SPCL {mean_s:.2f} px "
              f"({100 * (1 - mean_m / mean_s):.1f}% lower); slowest run {slowest:.0f} s")
    line = verdict(5, "toy training", ok, detail)
    assert ok, line


def _mass_near(grid, centre, radius=3.0):
    rr, cc = np.mgrid[:grid.shape[0], :grid.shape[1]]
    return float(grid[(rr - centre[0]) ** 2 + (cc - centre[1]) ** 2 <= radius ** 2].sum())


def test_criterion_6_symmetric_heatmaps(toy_runs):
    fractions = []
    for seed in SEEDS:
        run = toy_runs[seed, "mmgsd"]
        hits = 0
        for pair in run["test"]:
            end = pair.entries[0]
            grid = softmax_heatmap(run["net"].describe(pair.image_a), end.src, run["net"].describe(pair.image_b))
            hits += min(_mass_near(grid, d) for d in end.dsts) >= 0.25
        fractions.append(hits / len(run["test"]))
    ok = all(f >= 0.8 for f in fractions)
    line = verdict(6, "symmetric heatmaps", ok,
                   "endpoint pairs with >=25% mass near both ends: " + ", ".join(f"{f:.0%}" for f in fractions))
    assert ok, line


def test_criterion_7_uncertainty_ordering(toy_runs):
    v = TOY_MESH.vertex_count
    inner, outer = [], []
    for seed in SEEDS:
        for r in toy_runs[seed, "mmgsd"]["report"].records:
            if v // 3 <= r.vertex_id < v - v // 3:
                inner.append(r.entropy)
            elif r.vertex_id < 4 or r.vertex_id >= v - 4:
                outer.append(r.entropy)
    h_in, h_out = float(np.mean(inner)), float(np.mean(outer))
    ok = h_in > h_out
    line = verdict(7, "uncertainty ordering", ok, f"mean entropy interior {h_in:.3f} vs outermost {h_out:.3f} nats")
    assert ok, line


# ------------------------------------------------------------------ 8


def _pipeline(root):
    args = ["--seed", "5", "--threads", "1", "-q"]
    assert cli_main(["gen", "--kind", "rope", "--train", "12", "--test", "4", "--size", "64",
                     "--out", str(root / "data"), *args]) == 0
    for loss in ("mmgsd", "spcl"):
        assert cli_main(["train", "--data", str(root / "data"), "--loss", loss, "--epochs", "2",
                         "--out", str(root / loss), *args]) == 0
    assert cli_main(["eval", "--checkpoint", str(root / "mmgsd" / "model.sckp"),
                     "--checkpoint", str(root / "spcl" / "model.sckp"), "--data", str(root / "data"),
                     "--out", str(root / "eval"), *args]) == 0


def test_criterion_8_reproducibility(tmp_path):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    # run_config.json records the (different) output paths, everything else must match
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()
                 and f.name != "run_config.json"]
    key = ["data/manifest.json", "mmgsd/loss_curve.csv", "spcl/loss_curve.csv", "eval/mmgsd_report.json",
           "eval/spcl_report.json"]
    present = all((tmp_path / "a" / k).exists() for k in key)
    ok = present and not differing
    line = verdict(8, "reproducibility", ok,
                   f"{len(files)} artifacts compared, {len(differing)} differ" + (f": {differing}" if differing else ""))
    assert ok, line
