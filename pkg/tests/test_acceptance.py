"""Acceptance criteria, one test each, each printing a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``)
to see the verdict lines.
"""

import random
import time

import numpy as np
import pytest

import oracles
from hetsim import backends as B
from hetsim import experiments as E
from hetsim.layers import LayerKind, reference_forward
from hetsim.tensor import BoundingBox, cloud_coverage, iou
from test_gpu_manager import check_engine_run, engine_scenario, interleave


@pytest.fixture
def verdict(capsys):
    def report(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, detail
    return report


def cycles(name, pid):
    return E.run_config(E.load_scenario(name)).partition(pid).cycles


def ratio_check(pid, simd_band, gpu_band):
    t0 = time.perf_counter()
    c = {b: cycles(f"iso_{pid}_{b}", pid) for b in ("cpu", "simd", "gpu")}
    elapsed = time.perf_counter() - t0
    speedup, gpu_ratio = c["cpu"] / c["simd"], c["gpu"] / c["cpu"]
    ok = simd_band[0] <= speedup <= simd_band[1] and gpu_band[0] <= gpu_ratio <= gpu_band[1]
    return ok, speedup, gpu_ratio, elapsed


def test_criterion_1_cloud_ratios(verdict):
    ok, s, g, t = ratio_check("cloud", (1.7, 2.3), (1.5, 2.1))
    verdict(1, "cloud ratios", ok and t < 30, f"simd speedup={s:.4f} gpu/cpu={g:.4f} runtime={t:.2f}s")


def test_criterion_2_ship_ratios(verdict):
    ok, s, g, t = ratio_check("ship", (2.0, 3.0), (1.0, 1.35))
    verdict(2, "ship ratios", ok and t < 60, f"simd speedup={s:.4f} gpu/cpu={g:.4f} runtime={t:.2f}s")


def test_criterion_3_contention_bands(verdict):
    parts, ok = [], True
    for name in ("conc_ship_gpu_cloud_gpu", "conc_ship_simd_cloud_simd",
                 "conc_ship_simd_cloud_gpu", "conc_ship_gpu_cloud_simd"):
        rep = E.run_concurrent(E.load_scenario(name))
        sd = {p.id: p.slowdown for p in rep.partitions}
        if name == "conc_ship_gpu_cloud_gpu":
            ok &= sd["cloud"] > 5.0
        else:
            ok &= all(v <= 1.25 for v in sd.values())
        parts.append(f"{name}: cloud={sd['cloud']:.4f} ship={sd['ship']:.4f}")
    verdict(3, "contention bands", ok, "; ".join(parts))


def test_criterion_4_protocol_properties(verdict):
    t0 = time.perf_counter()
    failures = []
    for seed in range(1000):
        try:
            interleave(seed)
            check_engine_run(engine_scenario(random.Random(seed)))
        except AssertionError as exc:
            failures.append(f"seed {seed}: {exc}")
    t = time.perf_counter() - t0
    verdict(4, "protocol properties over 1000 seeds", not failures and t < 60,
            f"violations={len(failures)} runtime={t:.2f}s" + (f" first={failures[0]}" if failures else ""))


def test_criterion_5_backend_equivalence(verdict):
    rng = random.Random(5)
    cost = B.CostParams()
    n, mismatches, oracle_kinds = 0, [], set()
    while n < 200:
        layer, x = oracles.random_layer(rng)
        ref = reference_forward(layer, x)
        outs = [B.exec_layer(b, layer, x, cost)[0] for b in B.BACKENDS]
        if any(o != ref for o in outs):
            mismatches.append(f"backend mismatch on {layer.kind.name}")
        if layer.kind in (LayerKind.CONV2D, LayerKind.MAXPOOL2D, LayerKind.UPSAMPLE2D):
            oracle_kinds.add(layer.kind)
            if oracles.layer(layer, x) != ref:
                mismatches.append(f"oracle mismatch on {layer.kind.name}")
        n += 1
    ok = not mismatches and len(oracle_kinds) == 3
    verdict(5, "backend equivalence", ok, f"configs={n} mismatches={len(mismatches)}")


def test_criterion_6_determinism(verdict):
    bad = []
    for name in E.shipped_scenarios():
        cfg = E.load_scenario(name)
        runs = []
        for _ in range(2):
            keep = {}
            rep = E.run_config(cfg, keep=keep)
            runs.append((keep["outcome"].result.trace_text(), E.emit_report(rep), E.emit_report(rep, "records")))
        if runs[0] != runs[1] or not runs[0][0]:
            bad.append(name)
    verdict(6, "determinism of traces and reports", not bad,
            f"scenarios={len(E.shipped_scenarios())} differing={bad}")


def test_criterion_7_metric_units(verdict):
    v = iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 0, 3, 2))
    mask = np.zeros((32, 32), dtype=bool)
    mask.flat[:256] = True
    cov = cloud_coverage(mask)
    blob = B.KernelBlob("conv2d", int(LayerKind.CONV2D), bytes(range(256)) * 3)
    data = B.embed_blob(blob)
    round_trip = B.load_blob(data) == blob and B.embed_blob(B.load_blob(data)) == data
    ok = v == 1 / 3 and cov == 25.0 and round_trip
    verdict(7, "metric units", ok, f"iou={v!r} coverage={cov!r} blob_round_trip={round_trip}")


def test_criterion_8_twin_mode(verdict):
    bad, recorded = [], []
    for name in E.shipped_scenarios():
        cfg = E.load_scenario(name)
        tw = E.twin_compare(cfg)
        if not tw.outputs_equal:
            bad.append(f"{name}: outputs differ")
        if len(cfg.workloads) == 1 and not tw.cycles_equal:
            bad.append(f"{name}: isolation cycles differ")
        if tw.contended:
            worst = max(tw.discrepancy.values(), key=abs)
            recorded.append(f"{name} discrepancy={worst:+.4f} wall_ratio={tw.wall_ratio:.2f}x")
    verdict(8, "twin mode agreement", not bad, "; ".join(bad or recorded))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
