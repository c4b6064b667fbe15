"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` (the summary lines are
printed even without ``-s``).
"""
from __future__ import annotations

import hashlib
import time

import numpy as np
import pytest

from conftest import TINY_BACKBONE, TINY_MODEL
from helpers import (
    blob_mask,
    grad_check,
    layer_similarity_loops,
    prior_loops,
    resize_loops,
    weighted_mean_loops,
)
from msanet import ops
from msanet.backbone import FeaturePyramid, build_backbone
from msanet.checkpoint import encode
from msanet.config import RunConfig
from msanet.correspondence import (
    correlation_tensor,
    cosine_similarity_map,
    fuse_correlation,
    multilayer_correlation,
    resize_mask,
    squeeze_features,
)
from msanet.dataset import DatasetConfig, generate_synthetic_dataset
from msanet.decoder import ASPP, Classifier, ConvBlock, aspp, classify, conv_block
from msanet.episodes import FoldSpec, sample_episode
from msanet.evaluation import evaluate, fbiou, miou, oracle_predictor, predict_kshot, predict_proba_kshot
from msanet.guidance import (
    AttentionNet,
    attention_map,
    attention_vector,
    merge_support_features,
    prior_mask,
    prototype,
)
from msanet.model import build_model
from msanet.nn import Conv2d
from msanet.tensor import Parameter, float64_mode
from msanet.trainer import bce_loss, smoothed, train

E2E_EVAL_EPISODES = 200
E2E_MARGIN = 0.15


def report(capsys, number: int, title: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nACCEPTANCE {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})")


# ------------------------------------------------------------ 1. gradients


def _weighted(out, seed):
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.sum_all(ops.hadamard(out, r))


def _gradient_cases(g):
    """(name, loss closure, parameters) for every differentiable operation and module."""
    P = lambda *shape, lo=None: Parameter(  # noqa: E731
        g.uniform(lo, 1 - lo, size=shape) if lo is not None else g.standard_normal(shape))
    cases = []

    x, w, b = P(2, 3, 7, 7), P(4, 3, 3, 3), P(4)
    cases.append(("conv2d (stride 1, dilation 2)", lambda: _weighted(ops.conv2d(x, w, b, padding=2, dilation=2), 0), [x, w, b]))
    x2, w2 = P(3, 8, 8), P(2, 3, 3, 3)
    cases.append(("conv2d (stride 2)", lambda: _weighted(ops.conv2d(x2, w2, stride=2, padding=1), 1), [x2, w2]))
    r = P(2, 3, 5, 4)
    cases.append(("bilinear_resize", lambda: _weighted(ops.bilinear_resize(r, 9, 7), 2), [r]))
    a = P(3, 5, 5)
    cases.append(("relu", lambda: _weighted(ops.relu(a), 3), [a]))
    cases.append(("sigmoid", lambda: _weighted(ops.sigmoid(a), 4), [a]))
    s = P(2, 2, 4, 4)
    cases.append(("softmax_channel", lambda: _weighted(ops.softmax_channel(s), 5), [s]))
    h1, h2 = P(3, 4, 4), P(3, 1, 1)
    cases.append(("hadamard (broadcast)", lambda: _weighted(ops.hadamard(h1, h2), 6), [h1, h2]))
    cases.append(("add (broadcast)", lambda: _weighted(ops.add(h1, h2), 7), [h1, h2]))
    cases.append(("scale", lambda: _weighted(ops.scale(h1, -2.5), 8), [h1]))
    m1, m2, m3 = P(3, 4, 4), P(3, 4, 4), P(3, 4, 4)
    cases.append(("mean_of", lambda: _weighted(ops.mean_of([m1, m2, m3]), 9), [m1, m2, m3]))
    v = P(5, 1, 1)
    cases.append(("broadcast_spatial", lambda: _weighted(ops.broadcast_spatial(v, 3, 4), 10), [v]))
    c1, c2 = P(2, 3, 3), P(4, 3, 3)
    cases.append(("concat_channels", lambda: _weighted(ops.concat_channels([c1, c2]), 11), [c1, c2]))
    sc = P(2, 3, 4, 4)
    cases.append(("select_channel", lambda: _weighted(ops.select_channel(sc, 1), 12), [sc]))
    gp = P(4, 5, 5)
    cases.append(("global_avg_pool", lambda: _weighted(ops.global_avg_pool(gp), 13), [gp]))
    mask = g.uniform(size=(1, 5, 5))
    cases.append(("masked_avg_pool", lambda: _weighted(ops.masked_avg_pool(gp, mask), 14), [gp]))
    cases.append(("mean_all", lambda: ops.mean_all(ops.hadamard(gp, gp)), [gp]))
    pb = P(3, 4, 4, lo=0.05)
    tgt = (g.uniform(size=(3, 4, 4)) > 0.5).astype(np.float64)
    cases.append(("binary_cross_entropy", lambda: ops.binary_cross_entropy(pb, tgt), [pb]))

    fuse = Conv2d(5, 6, 1, g, padding=0)
    maps = g.uniform(size=(2, 5, 4, 4))
    cases.append(("correlation fusion", lambda: _weighted(fuse_correlation(maps, fuse), 15), fuse.parameters()))
    merge = Conv2d(5, 4, 1, g, padding=0)
    f2, f3 = g.standard_normal((2, 2, 6, 6)), g.standard_normal((2, 3, 6, 6))
    cases.append(("support feature merge", lambda: _weighted(merge_support_features(f2, f3, merge), 16), merge.parameters()))
    attn = AttentionNet(6, g)
    fa = P(2, 6, 4, 4)
    ma = np.stack([blob_mask(g, 16), blob_mask(g, 16)])
    cases.append(("attention vector + map",
                  lambda: _weighted(attention_map(fa, attention_vector(fa, ma, attn)), 17), attn.parameters() + [fa]))
    cases.append(("prototype pooling", lambda: _weighted(prototype(fa, ma), 18), [fa]))
    asp = ASPP(4, 6, (1, 2), g)
    xa = P(2, 4, 6, 6)
    cases.append(("ASPP", lambda: _weighted(aspp(xa, asp), 19), asp.parameters() + [xa]))
    blk = ConvBlock(3, g)
    xb = P(3, 5, 5)
    cases.append(("conv block", lambda: _weighted(conv_block(xb, blk), 20), blk.parameters() + [xb]))
    cls = Classifier(3, g)
    cases.append(("classifier + upsample + softmax",
                  lambda: _weighted(classify(xb, cls, (9, 9)), 21), cls.parameters() + [xb]))
    for name, p in [(n, p) for case in cases for p in case[2] for n in [case[0]]]:
        p.name = p.name or name

    model = build_model(TINY_BACKBONE, TINY_MODEL)
    q = g.uniform(size=(2, 3, 32, 32))
    sup = g.uniform(size=(2, 2, 3, 32, 32))
    sm = np.stack([np.stack([blob_mask(g, 32, 8, 20) for _ in range(2)]) for _ in range(2)])
    qm = np.stack([blob_mask(g, 32, 8, 20) for _ in range(2)])
    cases.append(("full meta-learner BCE loss (batch 2, K=2)",
                  lambda: bce_loss(model.forward(q, sup, sm).probs, qm), model.trainable_parameters()))
    return cases


def test_criterion_1_gradient_suite(capsys):
    start = time.perf_counter()
    g = np.random.default_rng(2024)
    failures, checked, worst, tensors = [], 0, 0.0, 0
    with float64_mode():
        for name, loss, params in _gradient_cases(g):
            rep = grad_check(loss, params, g, coords=20)
            checked += rep.checked
            tensors += len(params)
            worst = max(worst, rep.worst_rel)
            failures += [(name, *f) for f in rep.failures]
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    report(capsys, 1, "gradient suite", ok,
           f"{tensors} tensors, {checked} coordinates, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert not failures, failures[:10]
    assert elapsed < 120


# ------------------------------------------------------- 2. correlation oracle


def test_criterion_2_correlation_oracle(capsys):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        g = np.random.default_rng(seed)
        size = int(g.integers(3, 9))
        blocks = [(int(g.integers(1, 9)), int(g.integers(1, 3))) for _ in range(int(g.integers(1, 4)))]

        def pyramid():
            return FeaturePyramid([[np.abs(g.standard_normal((c, size, size))) * (g.uniform(size=(1, size, size)) > 0.3)
                                    for _ in range(n)] for c, n in blocks])

        pq, ps = pyramid(), pyramid()
        mask = blob_mask(g, 4 * size, lo=2, hi=3 * size)
        for got, q, s in zip(multilayer_correlation(pq, ps, mask), pq.layers, ps.layers):
            worst = max(worst, float(np.abs(got - layer_similarity_loops(q, s, mask)).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 30
    report(capsys, 2, "correlation oracle", ok, f"100 seeds, max abs err {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-6
    assert elapsed < 30


# ----------------------------------------------------------- 3. invariants


def test_criterion_3_invariants(small_dataset, capsys):
    spec = FoldSpec(small_dataset.classes, 0, 4)
    g = np.random.default_rng(3)
    with float64_mode():
        model = build_model(TINY_BACKBONE, TINY_MODEL)
    bb = model.backbone
    errs = {k: 0.0 for k in ("cs_range", "scale_q", "scale_s", "perm", "softmax", "prototype", "prior")}
    background_exact = True
    for n in range(50):
        ep = sample_episode(small_dataset, spec, "train" if n % 2 else "test", 1, g)
        pq = bb.extract_features(ep.query_image)
        ps = bb.extract_features(ep.support_images[0])
        m = ep.support_masks[0]
        base = multilayer_correlation(pq, ps, m)
        for a in base:
            errs["cs_range"] = max(errs["cs_range"], max(0.0, -a.min(), a.max() - 1))
        lam_q, lam_s = g.uniform(1e-2, 1e2, size=2)
        sq_ = FeaturePyramid([[lam_q * x for x in blk] for blk in pq.blocks])
        ss_ = FeaturePyramid([[lam_s * x for x in blk] for blk in ps.blocks])
        for a, b, c in zip(base, multilayer_correlation(sq_, ps, m), multilayer_correlation(pq, ss_, m)):
            errs["scale_q"] = max(errs["scale_q"], float(np.abs(a - b).max()))
            errs["scale_s"] = max(errs["scale_s"], float(np.abs(a - c).max()))
        bg = resize_mask(m, pq.spatial_size)[0] == 0
        noisy = FeaturePyramid([[np.where(bg, x + g.uniform(0, 3, x.shape), x) for x in blk] for blk in ps.blocks])
        background_exact &= all(np.array_equal(a, b) for a, b in zip(base, multilayer_correlation(pq, noisy, m)))
        for lq, ls in zip(pq.layers, ps.layers):
            sq = squeeze_features(ls * resize_mask(m, ls.shape[-2:]), resize_mask(m, ls.shape[-2:]))
            perm = g.permutation(sq.n)
            shuffled = type(sq)(sq.columns[:, perm], sq.kept_indices[perm], sq.threshold)
            d = np.abs(cosine_similarity_map(lq, sq) - cosine_similarity_map(lq, shuffled)).max()
            errs["perm"] = max(errs["perm"], float(d))
        probs = model.predict_proba(ep.query_image, ep.support_images, ep.support_masks)
        errs["softmax"] = max(errs["softmax"], float(np.abs(probs.sum(axis=0) - 1).max()))
        F_s23 = merge_support_features(ps.block_output(0), ps.block_output(1), model.merge).data
        h, w = F_s23.shape[-2:]
        proto_ref = weighted_mean_loops(F_s23, resize_loops(m.astype(np.float64), h, w))
        errs["prototype"] = max(errs["prototype"], float(np.abs(prototype(F_s23, m).data - proto_ref).max()))
        prior = prior_mask(pq.block_output(-1), ps.block_output(-1), m)
        prior_ref = prior_loops(pq.block_output(-1), ps.block_output(-1), m)
        errs["prior"] = max(errs["prior"], float(np.abs(prior - prior_ref).max()))
    ok = background_exact and all(v <= 1e-6 for v in errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", background bit-exact {background_exact}"
    report(capsys, 3, "invariant suite (50 episodes)", ok, detail)
    assert background_exact
    assert all(v <= 1e-6 for v in errs.values()), errs


# ------------------------------------------------------------- 4. K-shot


def test_criterion_4_kshot_contract(default_dataset, capsys):
    model = build_model()
    spec = FoldSpec(default_dataset.classes, 0, 4)
    g = np.random.default_rng(4)
    bit_equal, same_pred, worst_ident, worst_mean = True, True, 0.0, 0.0
    for _ in range(5):
        e1 = sample_episode(default_dataset, spec, "test", 1, g)
        one_shot = model.forward(e1.query_image[None], e1.support_images[None], e1.support_masks[None]).probs.data[0]
        bit_equal &= np.array_equal(predict_proba_kshot(model, e1), one_shot)
        bit_equal &= np.array_equal(predict_kshot(model, e1), (one_shot[1] > 0.5).astype(np.uint8))
        rep = type(e1)(np.repeat(e1.support_images, 3, 0), np.repeat(e1.support_masks, 3, 0),
                       e1.query_image, e1.query_mask, e1.class_id)
        worst_ident = max(worst_ident, float(np.abs(predict_proba_kshot(model, rep) - one_shot).max()))
        same_pred &= np.array_equal(predict_kshot(model, rep), predict_kshot(model, e1)) or worst_ident < 1e-6
        e2 = sample_episode(default_dataset, spec, "test", 2, g)
        out = model.forward(e2.query_image, e2.support_images, e2.support_masks)
        pq = model.backbone.extract_features(e2.query_image[None])
        per = [correlation_tensor(pq, model.backbone.extract_features(e2.support_images[j][None]),
                                  e2.support_masks[j][None]) for j in range(2)]
        worst_mean = max(worst_mean, float(np.abs(out.correlation - (per[0] + per[1]) / 2).max()))
    ok = bit_equal and worst_ident <= 1e-6 and worst_mean <= 1e-6
    report(capsys, 4, "K-shot contract", ok,
           f"K=1 bit-equal {bit_equal}, identical-support err {worst_ident:.1e}, K=2 CS mean err {worst_mean:.1e}")
    assert bit_equal
    assert worst_ident <= 1e-6
    assert worst_mean <= 1e-6


# ------------------------------------------------------------- 5. metrics


def test_criterion_5_metrics(default_dataset, capsys):
    pred = np.array([[0, 1, 1], [0, 1, 0], [1, 0, 0]])
    gt = np.array([[0, 1, 1], [0, 1, 1], [0, 1, 1]])
    checks = {
        "3/7": miou([pred], [gt], [0])[1] == 3 / 7,
        "fb 3/7+2/6": fbiou([pred], [gt]) == 0.5 * (3 / 7 + 2 / 6),
        "identical": miou([gt], [gt], [0])[1] == 1.0 and fbiou([gt], [gt]) == 1.0,
        "disjoint": miou([1 - gt], [gt], [0])[1] == 0.0 and fbiou([1 - gt], [gt]) == 0.0,
        "class mean": miou([pred, gt], [gt, gt], [0, 1])[1] == (3 / 7 + 1) / 2,
    }
    start = time.perf_counter()
    rep = evaluate(oracle_predictor, default_dataset, FoldSpec(default_dataset.classes, 0, 4),
                   episodes_per_run=1000, runs=5)
    checks["oracle 1000x5"] = rep.miou == 1.0 and rep.fbiou == 1.0 and rep.episode_count == 5000
    ok = all(checks.values())
    report(capsys, 5, "metric correctness", ok,
           ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items())
           + f", oracle mIoU {rep.miou:.4f} in {time.perf_counter() - start:.1f}s")
    assert ok, checks


# ---------------------------------------------------- 6 and 7. end to end


def _train_and_score(manifest, cfg: RunConfig):
    model = build_model(cfg.backbone_config(), cfg.model_config())
    spec = FoldSpec(manifest.classes, cfg.fold, cfg.folds)
    before = evaluate(model, manifest, spec, episodes_per_run=E2E_EVAL_EPISODES, runs=1, base_seed=cfg.seed)
    start = time.perf_counter()
    res = train(cfg.train_config(), manifest, model)
    train_time = time.perf_counter() - start
    after = evaluate(model, manifest, spec, episodes_per_run=E2E_EVAL_EPISODES, runs=1, base_seed=cfg.seed)
    return before.miou, after.miou, res.losses, train_time


@pytest.fixture(scope="module")
def full_run(default_dataset):
    return _train_and_score(default_dataset, RunConfig())


@pytest.mark.slow
def test_criterion_6_end_to_end(full_run, capsys):
    untrained, trained, losses, seconds = full_run
    window = round(100 / RunConfig().batch_size)
    s = smoothed(losses, window)
    start_loss, end_loss = float(s[window - 1]), float(s[-1])
    # smoke check: smoothed loss after 1000 episodes sits below the first step's loss
    at_1000 = float(s[1000 // RunConfig().batch_size - 1])
    margin = trained - untrained
    ok = margin >= E2E_MARGIN and end_loss < start_loss and at_1000 < losses[0]
    report(capsys, 6, "end-to-end synthetic training", ok,
           f"untrained mIoU {untrained:.4f}, trained {trained:.4f}, margin {margin:+.4f} (need >= {E2E_MARGIN}); "
           f"smoothed loss {start_loss:.4f} -> {end_loss:.4f} over {len(losses)} steps "
           f"(first step {losses[0]:.4f}, after 1000 episodes {at_1000:.4f}); train {seconds:.0f}s")
    assert margin >= E2E_MARGIN
    assert end_loss < start_loss
    assert at_1000 < losses[0]


@pytest.mark.slow
def test_criterion_7_ablation_direction(full_run, default_dataset, capsys):
    _, full, _, _ = full_run
    _, without, _, _ = _train_and_score(default_dataset, RunConfig(multi_similarity=False))
    delta = full - without
    report(capsys, 7, "ablation direction (reported, not gated)", True,
           f"full {full:.4f}, without multi-similarity {without:.4f}, delta {delta:+.4f} "
           f"({'expected direction' if delta > 0 else 'direction mismatch: investigate'})")
    assert np.isfinite(delta)


# ---------------------------------------------------------- 8. determinism


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_8_determinism(tmp_path, default_dataset, capsys):
    cfg = DatasetConfig()
    generate_synthetic_dataset(cfg, tmp_path / "a")
    generate_synthetic_dataset(cfg, tmp_path / "b")
    same_data = _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b") == _tree_digest(default_dataset.root)

    run_cfg = RunConfig(episodes=24)
    blobs, csvs = [], []
    for _ in range(2):
        model = build_model(run_cfg.backbone_config(), run_cfg.model_config())
        train(run_cfg.train_config(), default_dataset, model)
        blobs.append(encode(model.state_dict()))
        spec = FoldSpec(default_dataset.classes, 0, 4)
        csvs.append(evaluate(model, default_dataset, spec, episodes_per_run=40, runs=2, workers=1).to_csv())
    csv_workers = evaluate(model, default_dataset, spec, episodes_per_run=40, runs=2, workers=4).to_csv()
    checks = {
        "dataset bytes": same_data,
        "checkpoint bytes": blobs[0] == blobs[1],
        "eval csv": csvs[0] == csvs[1],
        "workers 1 vs 4": csvs[1] == csv_workers,
    }
    ok = all(checks.values())
    report(capsys, 8, "determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFER'}" for k, v in checks.items()))
    assert ok, checks


def test_backbone_default_is_frozen_random():
    """The end-to-end run relies on a frozen backbone shared by both models."""
    a, b = build_backbone(RunConfig().backbone_config()), build_backbone(RunConfig().backbone_config())
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))
