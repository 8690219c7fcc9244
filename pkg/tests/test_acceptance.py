"""Acceptance suite: one test per criterion, each at its stated tolerance.

A verdict line per criterion is printed in the terminal summary (see conftest).
The cross-validation criteria share one run, so this module takes over an hour.
"""

import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dualseg import cli, imaging, metrics
from dualseg.crossval import DEFAULT_VARIANTS, cross_validate
from dualseg.model import ModelConfig, build_model, param_count
from dualseg.pipeline import PipelineConfig, crop_target, make_multi_input, prepare_case, roi_from_mask, stage1_infer_batch
from dualseg.synthdata import case_spec, ellipse_bbox, gen_corpus, gen_phantom
from dualseg.tensor import Tensor, check_gradients, ops
from dualseg.training import TrainConfig, fit
from dualseg.wavelet import db2_filters, dwt2, idwt2
from gradcases import PRIMITIVES

pytestmark = pytest.mark.slow

# desk-scale CV budget (single CPU core): see README
CV_SEED = 7
CV_PIPELINE = PipelineConfig(stage1_size=64)
CV_STAGE1 = TrainConfig(phase_a_epochs=4, phase_b_epochs=16, seed=CV_SEED)
CV_STAGE2 = TrainConfig(phase_a_epochs=4, phase_b_epochs=16, seed=CV_SEED)
CV_BUDGET_S = 90 * 60


def _detail(record_property, text):
    record_property("detail", text)


@pytest.mark.acceptance(1, "gradient suite")
def test_gradient_suite(record_property):
    start = time.perf_counter()
    worst = {}
    for name, case in PRIMITIVES.items():
        for seed in range(20):
            fn, inputs = case(np.random.default_rng(seed))
            errors = check_gradients(fn, inputs, seed=seed)
            assert errors, name
            worst[name] = max(worst.get(name, 0.0), max(errors.values()))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    _detail(record_property, f"{len(worst)} primitives x 20 seeds, worst {top} {worst[top]:.2e}, {elapsed:.1f}s")
    assert "mm_block" in worst
    assert max(worst.values()) < 1e-4
    assert elapsed < 120


@pytest.mark.acceptance(2, "wavelet suite")
def test_wavelet_suite(record_property):
    f = db2_filters()
    h, g = f.lowpass, f.highpass
    identities = [h.sum() - np.sqrt(2), h @ h - 1, h[:2] @ h[2:], g @ g - 1, h @ g, g.sum(), np.arange(4) @ g]
    assert max(abs(v) for v in identities) <= 1e-12
    rng = np.random.default_rng(0)
    recon = energy = 0.0
    for size in (16, 32, 64):
        for _ in range(50):
            img = rng.standard_normal((size, size))
            bands = dwt2(img)
            recon = max(recon, np.abs(idwt2(bands) - img).max())
            total = sum(np.sum(getattr(bands, b) ** 2) for b in ("ll", "horizontal", "vertical", "diagonal"))
            energy = max(energy, abs(total - np.sum(img ** 2)))
    brute = 0.0
    for seed in range(10):
        img = np.random.default_rng(100 + seed).standard_normal((8, 8))
        got, ref = dwt2(img), oracles.dwt2_bruteforce(img)
        for name in ("ll", "horizontal", "vertical", "diagonal"):
            brute = max(brute, np.abs(getattr(got, name) - ref[name]).max())
    _detail(record_property, f"reconstruction {recon:.1e}, energy {energy:.1e}, brute force {brute:.1e}")
    assert recon <= 1e-10 and energy <= 1e-8 and brute <= 1e-10


@pytest.mark.acceptance(3, "convolution oracle")
def test_convolution_oracle(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(40):
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 9), rng.integers(1, 9)
        h, w = rng.integers(3, 17, size=2)
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.standard_normal((n, cin, h, w))
        wt, b = rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)
        got = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, pad=pad).data
        worst = max(worst, np.abs(got - oracles.conv2d_loops(x, wt, b, stride, pad)).max())
        dw = rng.standard_normal((cin, 1, 3, 3))
        got = ops.depthwise_conv2d(Tensor(x), Tensor(dw), stride=stride, pad=1).data
        worst = max(worst, np.abs(got - oracles.depthwise_loops(x, dw, stride, 1)).max())
    _detail(record_property, f"80 random shapes, max abs diff {worst:.1e}")
    assert worst <= 1e-6


@pytest.mark.acceptance(4, "contour-crop oracle")
def test_contour_crop_oracle(record_property):
    start = time.perf_counter()
    worst_side, survivors, distractors_in_box = 0, 0, 0
    for i in range(100):
        spec = case_spec(404, i)
        vol, _ = gen_phantom(spec)
        z = spec.dims[0] // 2
        gray = imaging.window_to_u8(vol.voxels[z])
        out, rec = imaging.abdomen_crop(gray)
        expect = ellipse_bbox(spec.abdomen_center, spec.abdomen_axes, gray.shape)
        worst_side = max(worst_side, int(np.abs(np.array(rec.bbox) - np.array(expect)).max()))
        yy, xx = np.mgrid[0:gray.shape[0], 0:gray.shape[1]]
        body = ((yy - spec.abdomen_center[0]) / spec.abdomen_axes[0]) ** 2 \
            + ((xx - spec.abdomen_center[1]) / spec.abdomen_axes[1]) ** 2 <= 1.0
        distractor = (gray > 0) & ~body
        assert distractor.sum() > 0
        r0, c0, r1, c1 = rec.bbox
        distractors_in_box += int(distractor[r0:r1, c0:c1].sum())
        # the body alone, resampled the same way; any surviving bright pixel would change it
        clean = np.where(body, gray, 0).astype(gray.dtype)[r0:r1, c0:c1]
        expected_out = imaging.resize_bilinear(clean, rec.size, rec.size)
        diff = np.abs(out.astype(np.float64) - expected_out.astype(np.float64)) > 0
        survivors += int(diff.any())
    elapsed = time.perf_counter() - start
    _detail(record_property, f"100 phantoms, worst side {worst_side}px, {distractors_in_box} distractor px inside "
                             f"boxes, {survivors} crops with survivors, {elapsed:.1f}s")
    assert worst_side <= 1 and survivors == 0 and elapsed < 30


@pytest.mark.acceptance(5, "parameter-count anchor")
def test_parameter_count_anchor(record_property):
    s1 = param_count(build_model(ModelConfig(input_size=(256, 256), use_mm_block=False), 0))
    s2 = param_count(build_model(ModelConfig(input_size=(64, 64), use_mm_block=True), 0))
    _detail(record_property, f"stage1 {s1:,} + stage2 {s2:,} = {s1 + s2:,}")
    assert 2_290_000 <= s1 + s2 <= 3_430_000


def _overfit_set():
    cfg = PipelineConfig(stage1_size=64)
    xs, ys = [], []
    for i in range(8):
        vol, masks = gen_phantom(case_spec(0, i))
        z = int(np.argmax(masks.sum(axis=(1, 2))))
        (_, img, _, _, gt376), = prepare_case(vol, masks, cfg, [z])
        roi = roi_from_mask(gt376, cfg)
        xs.append(make_multi_input(img, roi, cfg))
        ys.append(crop_target(gt376, roi, cfg.stage2_size))
    return np.stack(xs), np.stack(ys)[:, None].astype(np.float32)


@pytest.mark.acceptance(6, "overfit test")
def test_overfit(record_property, tmp_path):
    x, y = _overfit_set()
    start = time.perf_counter()
    runs = []
    for tag in ("a", "b"):
        model = build_model(ModelConfig(input_size=(64, 64), use_mm_block=True), seed=0)
        hist = fit(model, x, y, TrainConfig(seed=0), tmp_path / f"{tag}.ckpt")
        runs.append(hist)
    elapsed = (time.perf_counter() - start) / 2
    phase_b = [r for r in runs[0].records if r["phase"] == "B"]
    reached = next((i + 1 for i, r in enumerate(phase_b) if r["dsc"] >= 0.95), None)
    same = runs[0].to_jsonl() == runs[1].to_jsonl() and \
        (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    _detail(record_property, f"train DSC >= 0.95 at phase-B epoch {reached}, best {max(r['dsc'] for r in phase_b):.4f}, "
                             f"deterministic {same}, {elapsed:.0f}s per run")
    assert reached is not None and reached <= 100 and same and elapsed < 600


@pytest.fixture(scope="module")
def cv_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cv")
    start = time.perf_counter()
    manifest = gen_corpus(40, CV_SEED, root / "corpus")
    report = cross_validate(manifest, 4, CV_SEED, CV_PIPELINE, CV_STAGE1, CV_STAGE2, DEFAULT_VARIANTS)
    return report, time.perf_counter() - start


def _cv_dsc(report, name):
    return report["aggregate"][name]["per_slice"]["dsc"]["mean"]


def _fold_dsc(report, name):
    return [round(f["results"][name]["per_slice"]["dsc"]["mean"], 2) for f in report["folds"]]


@pytest.mark.acceptance(7, "end-to-end phantom CV and MM-block ablation")
def test_phantom_cross_validation(record_property, cv_run):
    report, elapsed = cv_run
    full, no_mm = _cv_dsc(report, "full"), _cv_dsc(report, "no_mm_block")
    _detail(record_property, f"full {full:.2f}% (folds {_fold_dsc(report, 'full')}), no MM-block {no_mm:.2f}% "
                             f"(folds {_fold_dsc(report, 'no_mm_block')}), {elapsed / 60:.1f} min")
    assert report["k"] == 4
    assert full >= 80.0
    assert no_mm < full
    assert elapsed < CV_BUDGET_S


@pytest.mark.acceptance(8, "wavelet ablation")
def test_wavelet_ablation(record_property, cv_run):
    report, _ = cv_run
    full, no_wav = _cv_dsc(report, "full"), _cv_dsc(report, "no_wavelet")
    _detail(record_property, f"full {full:.2f}%, zeroed wavelet channels {no_wav:.2f}% "
                             f"(folds {_fold_dsc(report, 'no_wavelet')})")
    assert no_wav < full


@pytest.mark.acceptance(9, "metrics oracle")
def test_metrics_oracle(record_property):
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(100):
        pred = (rng.random((64, 64)) < rng.uniform(0, 1)).astype(np.uint8)
        gt = (rng.random((64, 64)) < rng.uniform(0, 1)).astype(np.uint8)
        mismatches += metrics.score(pred, gt) != oracles.metrics_loops(pred, gt)
    hand = metrics.dsc(metrics.ConfusionCounts(tp=1, fp=1, fn=1, tn=1))
    _detail(record_property, f"{mismatches} mismatches in 100 pairs, hand-count DSC {hand}")
    assert mismatches == 0 and hand == 50.0


def _full_cli_run(root, conf):
    steps = [
        ["gen-data", "--n", 4, "--dims", 3, 96, 96, "--out", root / "corpus"],
        ["preprocess", "--data", root / "corpus", "--out", root / "prep"],
        ["train", "--stage", 1, "--data", root / "prep", "--out", root / "s1"],
        ["extract-roi", "--data", root / "prep", "--stage1-ckpt", root / "s1" / "stage1.ckpt", "--out", root / "roi"],
        ["train", "--stage", 2, "--data", root / "prep", "--stage1-roi", root / "roi" / "rois.json", "--out", root / "s2"],
        ["pipeline", "--data", root / "corpus", "--stage1-ckpt", root / "s1" / "stage1.ckpt",
         "--stage2-ckpt", root / "s2" / "stage2.ckpt", "--out", root / "pred"],
    ]
    for argv in steps:
        code = cli.main([str(a) for a in argv] + ["--config", str(conf), "--seed", "5"])
        assert code == 0, argv
    files = ["pred/predictions.json", "pred/report.json", "s1/history_stage1.jsonl", "s2/history_stage2.jsonl",
             "roi/rois.json", "s1/stage1.ckpt", "s2/stage2.ckpt"]
    files += sorted(str(p.relative_to(root)) for p in (root / "pred").glob("*.png"))
    return {name: (root / name).read_bytes() for name in files}


@pytest.mark.acceptance(10, "determinism")
def test_determinism(record_property, tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"pipeline": {"stage1_size": 64},
                                "train": {"phase_a_epochs": 2, "phase_b_epochs": 3}}))
    a = _full_cli_run(tmp_path / "a", conf)
    b = _full_cli_run(tmp_path / "b", conf)
    differing = sorted(k for k in a if a[k] != b.get(k))
    _detail(record_property, f"{len(a)} output files compared, {len(differing)} differ")
    assert a.keys() == b.keys() and not differing


@settings(max_examples=300, deadline=None, database=None)
@given(st.lists(st.tuples(st.integers(0, 375), st.integers(0, 375), st.integers(1, 60), st.integers(1, 60)),
                min_size=1, max_size=4))
def _check_nonempty_boxes(rects):
    mask = np.zeros((376, 376), dtype=np.uint8)
    for r, c, h, w in rects:
        mask[r:r + h, c:c + w] = 1
    rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
    box = roi_from_mask(mask)
    assert box.source == "predicted"
    assert box.as_list() == [max(0, rows[0] - 15), max(0, cols[0] - 15), min(376, rows[-1] + 16), min(376, cols[-1] + 16)]


@pytest.mark.acceptance(11, "ROI contract")
def test_roi_contract(record_property):
    cfg = PipelineConfig(stage1_size=64)
    model = build_model(ModelConfig(input_size=(64, 64)), seed=0)
    model.head_out.bias.data[...] = -50.0  # every probability far below the threshold
    frames = list(np.random.default_rng(11).integers(0, 256, (100, 376, 376)).astype(np.uint8))
    outs = stage1_infer_batch(model, frames, cfg)
    defaults = sum(not o.mask.any() and o.roi.source == "default" and o.roi.as_list() == [104, 73, 272, 302]
                   for o in outs)
    defaults += sum(roi_from_mask(np.zeros((376, 376), np.uint8)).as_list() == [104, 73, 272, 302] for _ in range(100))
    _check_nonempty_boxes()
    _detail(record_property, f"{defaults}/200 empty masks gave the 168x229 default box; 300 random nonempty masks padded by 15")
    assert defaults == 200
