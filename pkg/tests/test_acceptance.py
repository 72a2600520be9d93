"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected and repeated in the pytest terminal summary. Run
directly (``python tests/test_acceptance.py``) to print them without pytest.
"""

import statistics
import time

import numpy as np
import pytest

import oracles
import reference_paths as ref
from mrcfa.affinity import binary_mask_generation, compute_affinity, selection_count
from mrcfa.core import Tensor, grad_check, ops, precision
from mrcfa.cost import cost_affinity_path, count_parameters, measure_runtime
from mrcfa.data import load_dataset, make_dataset, save_dataset
from mrcfa.decoder import AffinityDecoder
from mrcfa.experiments import learning_signal, overfit
from mrcfa.io import decode_tensors, encode_tensors, load_tensors, save_tensors
from mrcfa.metrics import ConfusionMatrix, evaluate_predictions, miou, vc_n, wiou
from mrcfa.model import MRCFA, ModelConfig, segmentation_loss

RESULTS: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def rel_err(got, want) -> float:
    """Max absolute error relative to the largest reference magnitude."""
    want = np.asarray(want, dtype=np.float64)
    scale = max(np.abs(want).max(initial=0.0), 1e-30)
    return float(np.abs(np.asarray(got, dtype=np.float64) - want).max(initial=0.0) / scale)


def primitive_cases(rng, dtype):
    """One random small instance of each primitive: (name, package result, oracle result)."""
    m, k, n = rng.integers(1, 17, 3)
    a, b = rng.standard_normal((m, k)).astype(dtype), rng.standard_normal((k, n)).astype(dtype)
    yield "matmul", ops.matmul(Tensor(a), Tensor(b)).data, oracles.matmul(a, b)

    c_in, c_out = rng.integers(1, 5, 2)
    kh, kw = rng.integers(1, 4, 2)
    h, w = rng.integers(int(kh), 17), rng.integers(int(kw), 17)
    stride, pad = tuple(rng.integers(1, 3, 2)), tuple(rng.integers(0, 2, 2))
    x = rng.standard_normal((c_in, h, w)).astype(dtype)
    kern = rng.standard_normal((c_out, c_in, kh, kw)).astype(dtype)
    bias = rng.standard_normal(c_out).astype(dtype)
    got = ops.conv2d(Tensor(x), Tensor(kern), Tensor(bias), stride, pad).data
    yield "conv2d", got, oracles.conv2d(x, kern, stride, pad, bias)

    c = rng.integers(1, 5)
    h, w = rng.integers(1, 9, 2)
    h2, w2 = rng.integers(h, 17), rng.integers(w, 17)
    x = rng.standard_normal((c, h, w)).astype(dtype)
    yield "bilinear", ops.bilinear_upsample(Tensor(x), (h2, w2)).data, oracles.bilinear(x, h2, w2)

    rows, cols = rng.integers(1, 17, 2)
    vals = rng.integers(-4, 5, (rows, cols)).astype(dtype)  # small integers force ties
    topn = rng.integers(1, rows + 1)
    yield "topk", ops.topk_per_column(Tensor(vals), topn).data, oracles.topk_columns(vals, topn)

    x = rng.standard_normal((rows, cols)).astype(dtype)
    idx = rng.integers(0, rows, rng.integers(1, 17))
    yield "gather", ops.gather_rows(Tensor(x), idx).data, oracles.gather(x, idx)


def test_criterion_1_oracle_equivalence():
    start = time.perf_counter()
    worst: dict[tuple[str, str], float] = {}
    counts: dict[tuple[str, str], int] = {}
    tol = {"f32": 1e-5, "f64": 1e-10}
    for prec, dtype in (("f32", np.float32), ("f64", np.float64)):
        rng = np.random.default_rng(11)
        with precision(prec):
            for _ in range(100):
                for name, got, want in primitive_cases(rng, dtype):
                    key = (name, prec)
                    assert np.shape(got) == np.shape(want), (name, np.shape(got), np.shape(want))
                    worst[key] = max(worst.get(key, 0.0), rel_err(got, want))
                    counts[key] = counts.get(key, 0) + 1
    elapsed = time.perf_counter() - start
    ok = all(worst[k] <= tol[k[1]] for k in worst) and min(counts.values()) >= 100 and elapsed < 60
    detail = ", ".join(f"{n}/{p} {e:.1e}" for (n, p), e in sorted(worst.items()))
    record(1, "oracle equivalence", ok, f"{min(counts.values())} instances each, worst rel err {detail}; {elapsed:.1f}s")


def test_criterion_2_gradient_check():
    start = time.perf_counter()
    model, frames, labels = ref.grad_check_setup()
    with precision("f64"):
        margin = ref.relu_margin(model, frames)
        rep = grad_check(lambda: segmentation_loss(model(frames), labels), model.parameters(), eps=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - start
    name, err = rep.worst()
    total = sum(rep.checked.values())
    ok = rep.passed and total == model.num_parameters() and elapsed < 300
    record(
        2,
        "gradient correctness",
        ok,
        f"{total} entries over {len(rep.checked)} tensors (16x16, T=2, L=2), worst {err:.2e} in {name}, "
        f"relu margin {margin:.1e}; {elapsed:.1f}s",
    )


def test_criterion_3_token_selection_exactness():
    cfg = ModelConfig(
        image_size=(32, 32), strides=(2, 4, 8), channels=(4, 6, 8), c_hat=8, p=1.0, precision="f64", seed=1
    )
    model = MRCFA(cfg)
    rng = np.random.default_rng(3)
    frames = [rng.random((3, 32, 32)) for _ in range(cfg.T)]
    with precision("f64"):
        identical = np.array_equal(model(frames).data, ref.unmasked_forward(model, frames).data)

    tokens = cfg.token_count()
    counts_ok = True
    for tenth in range(1, 11):
        p = tenth / 10
        mask = binary_mask_generation(rng.standard_normal((tokens * 4, tokens)), cfg.n_top, p)
        counts_ok &= mask.size == max(1, int(np.floor(p * tokens + 1e-9))) == selection_count(p, tokens)

    commute = True
    for _ in range(20):
        q, k = rng.standard_normal((24, 8)), rng.standard_normal((16, 8))
        mask = binary_mask_generation(q @ k.T, 2, rng.uniform(0.1, 1.0))
        with precision("f64"):
            gathered = compute_affinity(Tensor(q), ops.gather_rows(Tensor(k), mask.indices)).data
            full = compute_affinity(Tensor(q), Tensor(k)).data
        commute &= np.array_equal(gathered, full[:, mask.indices])
    ok = identical and counts_ok and commute
    record(
        3,
        "token selection exactness",
        ok,
        f"p=1 bit-identical to unmasked path: {identical}; S=floor(pN) for p=0.1..1.0: {counts_ok}; "
        f"gather/multiply commute exactly: {commute}",
    )


def test_criterion_4_decoder_structure():
    rng = np.random.default_rng(4)
    with precision("f64"):
        dec = AffinityDecoder(3, 3, rng)
        dec.make_identity()
        dims = [(4, 4)] * 3
        affs = [rng.standard_normal((16, 3)) for _ in dims]
        out = dec([Tensor(a) for a in affs], dims).data
        grids = [a.T.reshape(3, 4, 4) for a in affs]
        expected = (grids[2] + grids[1]) + grids[0]  # folded deepest first
        identity_ok = np.array_equal(out, expected)

        single = AffinityDecoder(3, 1, rng)
        aff = rng.standard_normal((20, 3))
        b1 = single([Tensor(aff)], [(4, 5)]).data
        refined = single.sar_refine(Tensor(aff), (4, 5), 0).data
        stack = single.refine[0].layers
        step = oracles.conv2d(aff.T.reshape(3, 4, 5), stack[0].weight.data, (1, 1), (1, 1), stack[0].bias.data)
        oracle = oracles.conv2d(np.maximum(step, 0), stack[1].weight.data, (1, 1), (1, 1), stack[1].bias.data)
        single_ok = np.array_equal(b1, refined) and np.allclose(b1, oracle, atol=1e-12) and not single.aggregate
    ok = identity_ok and single_ok
    record(
        4,
        "decoder structure",
        ok,
        f"identity decoder equals summed permuted affinities exactly: {identity_ok}; "
        f"L=1 output is the refined affinity: {single_ok}",
    )


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    vc_ok, checked = True, 0
    while checked < 200:
        gt = [rng.integers(0, 3, (4, 4)) for _ in range(3)]
        pred = [np.where(rng.random((4, 4)) < 0.6, g, rng.integers(0, 3, (4, 4))) for g in gt]
        n = int(rng.integers(1, 4))
        try:
            want = oracles.vc_window(gt, pred, n)
        except ZeroDivisionError:
            continue
        vc_ok &= abs(vc_n(gt, pred, n) - want) <= 1e-12
        checked += 1

    iou_ok = True
    for _ in range(50):
        gt, pred = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
        cm = ConfusionMatrix(4).update(gt, pred)
        m, w = oracles.iou_by_counting(gt, pred, 4)
        iou_ok &= abs(miou(cm) - m) <= 1e-12 and abs(wiou(cm) - w) <= 1e-12

    videos = [([l for l in c.labels], [l.copy() for l in c.labels]) for c in make_dataset(5, 3, frames=8)]
    rep = evaluate_predictions(videos, 4, 4)
    perfect = (rep.miou, rep.wiou, rep.mvc) == (1.0, 1.0, 1.0)
    ok = vc_ok and iou_ok and perfect
    record(
        5,
        "metric oracles",
        ok,
        f"VC vs window oracle on {checked} random triples: {vc_ok}; mIoU/WIoU vs counting oracle: {iou_ok}; "
        f"pred==gt gives exactly 1.0: {perfect}",
    )


def test_criterion_6_cost_trends():
    ratios = (1.0, 0.5, 0.1)
    base = ModelConfig()
    flops = [cost_affinity_path(base.replace(p=p)).total_flops for p in ratios]
    flops_ok = flops[0] > flops[1] > flops[2]

    medians = [measure_runtime(base.replace(p=p), (128, 128), repeats=3).median for p in ratios]
    time_ok = medians[0] >= medians[1] >= medians[2]

    scales = [base.replace(num_scales=l) for l in (1, 2, 3)]
    l_flops = [cost_affinity_path(c).total_flops for c in scales]
    l_params = [count_parameters(c) for c in scales]
    l_ok = l_flops == sorted(l_flops) and l_params == sorted(l_params)
    l_ok &= all(count_parameters(c) == MRCFA(c).num_parameters() for c in scales)
    reduction = (flops[0] - flops[1]) / flops[0]
    ok = flops_ok and time_ok and l_ok
    record(
        6,
        "cost trends",
        ok,
        f"flops p=1/.5/.1 {flops} (cut {reduction:.0%} at p=.5); 128x128 median forward s "
        f"{[round(m, 4) for m in medians]}; L=1/2/3 flops {l_flops} params {l_params}",
    )


def test_criterion_7_learning_signal():
    start = time.perf_counter()
    res = learning_signal(seeds=(0, 1, 2, 3, 4), steps=2000)
    elapsed = time.perf_counter() - start
    m_iou, s_iou = res.median("multi", "miou"), res.median("single", "miou")
    m_vc, s_vc = res.median("multi", "mvc"), res.median("single", "mvc")
    ok = m_iou >= s_iou and m_vc > s_vc and elapsed < 1800
    per_seed = "; ".join(
        f"seed {a.seed} {a.miou:.3f}/{a.mvc:.3f} vs {b.miou:.3f}/{b.mvc:.3f}" for a, b in zip(res.multi, res.single)
    )
    record(
        7,
        "learning signal",
        ok,
        f"median mIoU T=4 {m_iou:.3f} vs T=1 {s_iou:.3f}, median mVC4 {m_vc:.3f} vs {s_vc:.3f} "
        f"({per_seed}); {elapsed / 60:.1f} min",
    )


def test_criterion_8_overfit():
    res = overfit(seed=0, steps=1000)
    step = res.first_below(0.05)
    ok = step is not None and res.miou > 0.9
    record(8, "overfit sanity", ok, f"10-step mean loss below 0.05 at step {step}; clip mIoU {res.miou:.3f}")


def test_criterion_9_round_trips(tmp_path):
    model = MRCFA(ModelConfig())
    state = model.state_dict()
    save_tensors(tmp_path / "a.tns", state)
    loaded = load_tensors(tmp_path / "a.tns")
    save_tensors(tmp_path / "b.tns", loaded)
    ckpt_ok = (tmp_path / "a.tns").read_bytes() == (tmp_path / "b.tns").read_bytes()
    ckpt_ok &= all(np.array_equal(loaded[k], state[k].astype(np.float32)) for k in state)
    reload = MRCFA(ModelConfig(seed=9))
    reload.load_state_dict(loaded)
    save_tensors(tmp_path / "c.tns", reload.state_dict())
    ckpt_ok &= (tmp_path / "c.tns").read_bytes() == (tmp_path / "a.tns").read_bytes()

    arr = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    endian_ok = encode_tensors({"w": arr.astype(">f4")}) == encode_tensors({"w": arr.astype("<f4")})
    endian_ok &= decode_tensors(encode_tensors({"w": arr.astype(">f4")}))["w"].dtype.str == "<f4"

    clips = make_dataset(9, 3, frames=4)
    save_dataset(tmp_path / "d1", clips, {"num_classes": 4})
    save_dataset(tmp_path / "d2", load_dataset(tmp_path / "d1"), {"num_classes": 4})
    files = sorted(p.relative_to(tmp_path / "d1") for p in (tmp_path / "d1").rglob("*") if p.is_file())
    data_ok = bool(files) and all((tmp_path / "d1" / f).read_bytes() == (tmp_path / "d2" / f).read_bytes() for f in files)
    back = load_dataset(tmp_path / "d1")
    data_ok &= all(
        np.array_equal(a, b) for c, d in zip(clips, back) for a, b in zip(c.frames + c.labels, d.frames + d.labels)
    )
    ok = ckpt_ok and endian_ok and data_ok
    record(
        9,
        "round-trip I/O",
        ok,
        f"checkpoint byte-exact: {ckpt_ok}; big-endian input stored little-endian: {endian_ok}; "
        f"dataset ({len(files)} files) byte-exact: {data_ok}",
    )


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
