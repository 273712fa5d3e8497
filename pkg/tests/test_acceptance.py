"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run standalone with ``python3 tests/test_acceptance.py`` or as part of the suite.
"""

import time
import warnings

import numpy as np
import pytest

from _oracles import best_mapping_weight, brute_der, random_turns
from test_proposals import reference_nms
from test_tensor import _ops
from rpnsd.anchors import ANCHOR_SIZES, build_anchor_grid
from rpnsd.annotation import Annotation, canonicalize, from_turns
from rpnsd.checkpoint import load_checkpoint, save_checkpoint
from rpnsd.features import make_speaker_inventory, synthetic_features
from rpnsd.io import read_rttm, write_rttm
from rpnsd.losses import LossBreakdown, binary_cls_loss, smooth_l1_loss, speaker_cls_loss
from rpnsd.model import RPNSDNet, desk_config, micro_config, full_config
from rpnsd.pipeline import PostprocessConfig, postprocess
from rpnsd.proposals import ProposalSet, RoiAlignConfig, decode_deltas, encode_deltas, nms, roi_align
from rpnsd.scoring import ScoringConfig, _assign, corpus_der, der, overlap_stats
from rpnsd.simulate import SimulationSpec, mixture_chunks, simulate_mixture
from rpnsd.tensor import Tensor, grad_check
from rpnsd.training import train

RESULTS: dict[int, str] = {}


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    emit = reporter.write_line if reporter else print
    emit("")
    for n in sorted(RESULTS):
        emit(RESULTS[n])


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def within(seconds, start):
    return time.perf_counter() - start < seconds


# 1 -------------------------------------------------------------------------------------


def test_c01_anchor_geometry():
    t0 = time.perf_counter()
    cfg = full_config()
    grid = build_anchor_grid(cfg.timesteps, ANCHOR_SIZES, cfg.frames_per_step)
    lengths = np.diff(grid.anchors, axis=1).ravel()
    ok = (
        cfg.timesteps == 63
        and len(ANCHOR_SIZES) == 9
        and cfg.frames_per_step == 16
        and len(grid.anchors) == 567
        and lengths.min() == 16
        and lengths.max() == 1024
        and within(1, t0)
    )
    record(1, ok, f"{len(grid.anchors)} anchors, lengths {lengths.min():g}-{lengths.max():g} frames")


# 2 -------------------------------------------------------------------------------------


def test_c02_coordinate_round_trip():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    n = 100_000
    s = rng.uniform(-500, 1500, n)
    seg = np.stack([s, s + rng.uniform(0.5, 1024, n)], axis=1)
    r = rng.uniform(-500, 1500, n)
    ref = np.stack([r, r + rng.uniform(0.5, 1024, n)], axis=1)
    err = np.max(np.abs(decode_deltas(encode_deltas(seg, ref), ref) - seg))
    record(2, err <= 1e-9 and within(5, t0), f"max round-trip error {err:.1e} frames over {n} pairs")


# 3 -------------------------------------------------------------------------------------


def test_c03_nms_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        starts = rng.uniform(0, 300, n)
        boxes = np.stack([starts, starts + rng.uniform(1, 120, n)], axis=1)
        scores = np.round(rng.uniform(0, 1, n), 2)  # rounding forces ties
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        mismatches += nms(boxes, thr, scores).tolist() != reference_nms(boxes, scores, thr)
    record(3, mismatches == 0 and within(10, t0), f"{mismatches} mismatches in 1000 sets")


# 4 -------------------------------------------------------------------------------------


def _bilinear(fmap, uf, ut):
    """Vectorized scalar-grid bilinear lookup; cell k sits at k + 0.5, edges clamp."""
    _, f, t = fmap.shape
    pf = np.clip(uf - 0.5, 0, f - 1)
    pt = np.clip(ut - 0.5, 0, t - 1)
    f0, t0 = np.floor(pf).astype(int), np.floor(pt).astype(int)
    f1, t1 = np.minimum(f0 + 1, f - 1), np.minimum(t0 + 1, t - 1)
    a, b = pf - f0, pt - t0
    return (
        (1 - a) * (1 - b) * fmap[:, f0, t0]
        + (1 - a) * b * fmap[:, f0, t1]
        + a * (1 - b) * fmap[:, f1, t0]
        + a * b * fmap[:, f1, t1]
    )


def _monte_carlo(fmap, roi, bins, samples, rng):
    _, f, _ = fmap.shape
    out = np.zeros((fmap.shape[0], bins, bins))
    bh, bw = f / bins, (roi[1] - roi[0]) / bins
    for i in range(bins):
        for j in range(bins):
            uf = rng.uniform(i * bh, (i + 1) * bh, samples)
            ut = rng.uniform(roi[0] + j * bw, roi[0] + (j + 1) * bw, samples)
            out[:, i, j] = _bilinear(fmap, uf, ut).mean(axis=1)
    return out


def _smooth_map(rng, c=2, f=16, t=63):
    ff, tt = np.meshgrid(np.arange(f) + 0.5, np.arange(t) + 0.5, indexing="ij")
    fmap = np.zeros((c, f, t))
    for ch in range(c):
        fmap[ch] = 3.0 + rng.uniform(-1, 1)
        for _ in range(3):
            kf, kt = rng.integers(0, 2), rng.integers(0, 3)
            fmap[ch] += 0.4 * np.cos(2 * np.pi * (kf * ff / (4 * f) + kt * tt / (4 * t)) + rng.uniform(0, 6.3))
    return fmap


def test_c04_roi_align_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        fmap = _smooth_map(rng)
        s = rng.uniform(-2, 50)
        roi = (s, s + rng.uniform(1, 30))
        got = roi_align(Tensor(fmap), [roi], RoiAlignConfig(3)).data[0]
        ref = _monte_carlo(fmap, roi, 3, 4000, rng)
        worst = max(worst, float(np.max(np.abs(got - ref) / np.abs(ref))))

    const = roi_align(Tensor(np.full((3, 16, 63), -1.25)), [[3.3, 17.9], [0.0, 63.0]]).data
    const_err = float(np.max(np.abs(const + 1.25)))
    # linear in both axes; the RoI keeps every sample inside the cell-centre hull
    ff, tt = np.meshgrid(np.arange(16) + 0.5, np.arange(40) + 0.5, indexing="ij")
    lin = (0.75 + 0.3 * ff - 0.2 * tt)[None]
    roi = (2.25, 31.5)
    out = roi_align(Tensor(lin), [roi], RoiAlignConfig(7)).data[0, 0]
    cf = (np.arange(7) + 0.5) * 16 / 7
    ct = roi[0] + (np.arange(7) + 0.5) * (roi[1] - roi[0]) / 7
    lin_err = float(np.max(np.abs(out - (0.75 + 0.3 * cf[:, None] - 0.2 * ct[None, :]))))
    ok = worst < 0.02 and const_err <= 1e-9 and lin_err <= 1e-9 and within(30, t0)
    record(4, ok, f"Monte-Carlo max rel err {worst:.2%}; constant {const_err:.1e}; linear {lin_err:.1e}")


# 5 -------------------------------------------------------------------------------------


def _model_loss_grad_error(points):
    model = RPNSDNet(micro_config(seed=5), make_speaker_inventory(3, dim=8, seed=5).speakers)
    jitter = np.random.default_rng(50)
    for k, p in model.params.items():
        if k.endswith("bias"):
            p.data = p.data + jitter.normal(0.0, 0.01, size=p.shape)
    inv = make_speaker_inventory(3, dim=8, seed=5)
    ann = from_turns("g", [(inv.speakers[0], 0.05, 0.3), (inv.speakers[2], 0.22, 0.5)])
    chunk = synthetic_features(inv, ann, 64, 5, 0.01)
    _, plan = model.compute_loss(chunk, ann, rng=0)

    def loss():
        return model.compute_loss(chunk, ann, plan=plan)[0].total

    model.zero_grad()
    loss().backward()
    grads = {k: p.grad.copy() for k, p in model.params.items()}
    rng = np.random.default_rng(51)
    names = sorted(model.params)
    eps, worst, checked = 1e-6, 0.0, 0
    while checked < points:
        name = names[checked % len(names)] if checked < len(names) else names[rng.integers(len(names))]
        flat = model.params[name].data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        base = float(loss().data)
        flat[i] = orig + eps
        up = float(loss().data)
        flat[i] = orig - eps
        down = float(loss().data)
        flat[i] = orig
        fwd, bwd = (up - base) / eps, (base - down) / eps
        if abs(fwd - bwd) > 1e-5 * max(1.0, abs(fwd)):
            continue  # kink
        g = grads[name].reshape(-1)[i]
        worst = max(worst, abs(g - (up - down) / (2 * eps)) / max(1.0, abs(g)))
        checked += 1
    return worst


def test_c05_gradient_suite():
    t0 = time.perf_counter()
    names = [n for n, _, _ in _ops(np.random.default_rng(0))]
    worst_op, worst_name = 0.0, ""
    for name in names:
        for point in range(20):
            fn, x = {n: (f, x) for n, f, x in _ops(np.random.default_rng(point))}[name]
            err = grad_check(fn, x, eps=1e-5)
            if err > worst_op:
                worst_op, worst_name = err, name
    model_err = _model_loss_grad_error(40)
    ok = worst_op <= 1e-4 and model_err <= 1e-4 and within(120, t0)
    record(5, ok, f"{len(names)} ops x 20 points worst {worst_op:.1e} ({worst_name}); micro-model loss {model_err:.1e}")


# 6 -------------------------------------------------------------------------------------


def test_c06_loss_closed_forms():
    bce = float(binary_cls_loss(Tensor([0.5]), np.array([1.0])).data)
    sl_half = float(smooth_l1_loss(Tensor([[0.5, 0.0]]), np.zeros((1, 2)), 1).data)
    sl_two = float(smooth_l1_loss(Tensor([[2.0, 0.0]]), np.zeros((1, 2)), 1).data)
    ce_err = 0.0
    for k in (2, 3, 7, 128):
        ce = float(speaker_cls_loss(Tensor(np.full((4, k), 1.0 / k)), np.arange(4) % k).data)
        ce_err = max(ce_err, abs(ce - np.log(k)))
    parts = LossBreakdown(0.3, 0.1, 0.4, 0.05, 2.0)
    linear = all(
        abs(LossBreakdown(0.3, 0.1, 0.4, 0.05, 2.0, alpha=a).total - (0.85 + a * 2.0)) <= 1e-12 for a in (0.1, 1.0)
    )
    ok = (
        abs(bce - np.log(2)) <= 1e-12
        and sl_half == 0.125
        and sl_two == 1.5
        and ce_err <= 1e-12
        and linear
        and parts.total == pytest.approx(0.85 + 2.0)
    )
    record(6, ok, f"BCE(0.5)-log2 {bce - np.log(2):.1e}; smooth-L1 {sl_half}, {sl_two}; CE-logK {ce_err:.1e}")


# 7 -------------------------------------------------------------------------------------


def test_c07_der_scorer_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    pairs = []
    while len(pairs) < 200:
        rt = random_turns(rng, int(rng.integers(1, 4)), 6.0)
        ht = random_turns(rng, int(rng.integers(0, 4)), 6.0, prefix="h")
        pairs.append((rt, ht))
    worst = 0.0
    for collar in (0.0, 0.1, 0.25):
        for overlap in (True, False):
            cfg = ScoringConfig(collar_s=collar, score_overlap=overlap)
            for rt, ht in pairs:
                expected = brute_der(rt, ht, collar, overlap)
                if expected is None:
                    continue
                worst = max(worst, abs(der(from_turns("r", rt), from_turns("r", ht), cfg).der - expected))
    ref = from_turns("r", pairs[0][0])
    same = der(ref, ref).der
    empty = der(ref, Annotation("r"))
    ok = worst <= 5e-4 and same == 0.0 and empty.der == 1.0 and empty.miss == 1.0 and within(60, t0)
    record(7, ok, f"max |DER - oracle| {100 * worst:.3f}% over 200 pairs x 6 settings; DER(x,x)={same}")


# 8 -------------------------------------------------------------------------------------


def test_c08_mapping_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(500):
        r, c = rng.integers(1, 7, size=2)
        w = rng.integers(0, 100, size=(r, c)).astype(float) * (rng.uniform(size=(r, c)) < 0.7)
        mapping = _assign(w)
        injective = len(set(mapping.values())) == len(mapping)
        bad += not injective or sum(w[h, k] for h, k in mapping.items()) != best_mapping_weight(w)
    record(8, bad == 0 and within(10, t0), f"{bad} of 500 assignments differ from exhaustive search")


# 9 -------------------------------------------------------------------------------------


def test_c09_oracle_pipeline():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    reports = []
    for _ in range(30):
        k = int(rng.integers(1, 5))
        ref = canonicalize(from_turns("r", random_turns(rng, k, 30.0)))
        spans, names = ref.to_frames(0.01)
        centres = {s: rng.normal(scale=10.0, size=16) for s in ref.speakers}
        emb = np.array([centres[n] + 0.05 * rng.standard_normal(16) for n in names])
        proposals = ProposalSet(spans, np.ones(len(spans)), emb)
        hyp = postprocess([proposals], PostprocessConfig(0.5, 0.3, len(ref.speakers)), 0.01, "r")
        reports.append(der(ref, hyp))
    worst = max(r.der for r in reports)
    record(9, worst <= 0.005 and within(10, t0), f"max DER {100 * worst:.3f}% over 30 recordings")


# 10 ------------------------------------------------------------------------------------


def test_c10_simulation_trend():
    t0 = time.perf_counter()
    inv = make_speaker_inventory(20, seed=10)
    medians, gap_errs = [], []
    for beta in (2.0, 3.0, 5.0):
        ratios, gaps = [], []
        for corpus in range(20):
            spec = SimulationSpec(inv, beta=beta, num_mixtures=10, seed=1000 * corpus + int(beta))
            for i in range(spec.num_mixtures):
                m = simulate_mixture(spec, i)
                ratios.append(overlap_stats(m.annotation).overlap_ratio)
                gaps.extend(g for v in m.gaps.values() for g in v)
        medians.append(float(np.median(ratios)))
        gap_errs.append(abs(np.mean(gaps) / beta - 1.0))
    ok = medians[0] > medians[1] > medians[2] and max(gap_errs) <= 0.05 and within(120, t0)
    shown = " / ".join(f"{100 * m:.1f}" for m in medians)
    record(10, ok, f"median overlap {shown}% for beta 2/3/5; max gap-mean error {100 * max(gap_errs):.1f}%")


# 11 ------------------------------------------------------------------------------------

SMOKE = dict(speakers=30, separation=2.0, beta=2.0, train_chunks=200, test_chunks=60, steps=3000, seed=0)


def _chunks(spec, n, offset):
    out, i = [], 0
    while len(out) < n:
        m = simulate_mixture(spec, offset + i)
        out += [c for c in mixture_chunks(m, 512) if c[1].turns]
        i += 1
    return out[:n]


def _held_out_der(model, data):
    reports = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for chunk, ann in data:
            cfg = PostprocessConfig(num_speakers=len(ann.speakers), seed=SMOKE["seed"])
            reports.append(der(ann, postprocess([model.forward(chunk)], cfg, chunk.frame_shift_s, ann.recording_id)))
    return corpus_der(reports).der


def test_c11_desk_training_smoke():
    t0 = time.perf_counter()
    inv = make_speaker_inventory(SMOKE["speakers"], dim=16, separation=SMOKE["separation"])
    spec = SimulationSpec(inv, beta=SMOKE["beta"], seed=1)
    train_data = _chunks(spec, SMOKE["train_chunks"], 0)
    test_data = _chunks(spec, SMOKE["test_chunks"], 10**6)
    steps = SMOKE["steps"]
    cfg = desk_config(
        num_speakers=len(inv.speakers), lr_decay_steps=(int(0.7 * steps), int(0.9 * steps)), seed=SMOKE["seed"]
    )
    model = RPNSDNet(cfg, inv.speakers)
    untrained = _held_out_der(model, test_data)
    _, hist = train(model, train_data, steps, batch_size=4)
    trained = _held_out_der(model, test_data)
    terms = ("rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg", "spk_cls", "total")
    first = {k: np.mean([h[k] for h in hist[:50]]) for k in terms}
    last = {k: np.mean([h[k] for h in hist[-50:]]) for k in terms}
    decreasing = all(last[k] < first[k] for k in terms)
    minutes = (time.perf_counter() - t0) / 60
    ok = trained <= 0.20 and trained <= 0.5 * untrained and decreasing and minutes <= 30
    record(
        11,
        ok,
        f"held-out DER {100 * trained:.1f}% (untrained {100 * untrained:.1f}%, target <= 20%); "
        f"loss {first['total']:.3f} -> {last['total']:.3f}; {minutes:.1f} min",
    )


# 12 ------------------------------------------------------------------------------------


def test_c12_persistence(tmp_path):
    t0 = time.perf_counter()
    inv = make_speaker_inventory(3, dim=8, seed=12)
    model = RPNSDNet(micro_config(seed=12), inv.speakers)
    for p in model.params.values():
        p.data = p.data + np.random.default_rng(12).normal(0, 0.05, size=p.shape)
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    loaded = load_checkpoint(path).build_model()
    rng = np.random.default_rng(120)
    identical = True
    for _ in range(5):
        x = np.abs(rng.normal(size=(8, 64)))
        a, b = model.forward(x), loaded.forward(x)
        identical &= all(
            getattr(a, f).tobytes() == getattr(b, f).tobytes() for f in ("intervals", "scores", "embeddings")
        )
    anns = [from_turns(f"rec{i}", random_turns(rng, 3, 60.0)) for i in range(5)]
    write_rttm(anns, tmp_path / "x.rttm")
    back = read_rttm(tmp_path / "x.rttm")
    worst = 0.0
    for a in anns:
        want = canonicalize(a).turns
        got = back[a.recording_id].turns
        assert len(want) == len(got)
        for w, g in zip(want, got):
            assert w.speaker == g.speaker
            worst = max(worst, abs(w.start - g.start), abs(w.end - g.end))
    ok = identical and worst <= 1e-3 and within(10, t0)
    record(12, ok, f"checkpoint forward bit-identical: {identical}; RTTM max error {worst * 1000:.2f} ms")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
