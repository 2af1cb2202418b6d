"""Acceptance gate: one test per contract criterion, each asserting its
stated tolerance and runtime budget.

Run with ``pytest -v tests/test_acceptance.py`` to get one pass/fail
line per criterion.
"""

import json
import subprocess
import sys
import time
from fractions import Fraction
from importlib import resources

import numpy as np
import pytest

from sepconv3d import cli, costs, kernels, netcfg, verify
from sepconv3d.kernels import KernelBank
from sepconv3d.netcfg import LayerSpec
from sepconv3d.volume import Shape4, Volume4, read_sv3d, save_volume, write_sv3d


def _shipped(name):
    return netcfg.parse_config(
        resources.files("sepconv3d.configs").joinpath(name + ".json").read_text()
    )


def _totals(cfg, variant):
    sub = cfg if variant == "full" else netcfg.substitute_variant(cfg, variant)
    return costs.count_network(sub).total


# reference totals the shipped transcriptions must reproduce: GMACs and
# M-params per variant, ops reduction factors, and the stack's share of
# whole-network ops
REFERENCE = {
    "ganet11-3d": {
        "full": (217.44, 0.76), "fwsc": (43.05, 0.26), "fdwsc": (40.60, 0.25),
        "ops_factor": {"fwsc": 5.1, "fdwsc": 5.4},
        "params_factor": {"fwsc": 2.9, "fdwsc": 3.0},
        "ops_share_pct": 91.9,
    },
    "ganetdeep-3d": {
        "full": (358.85, 1.80), "fwsc": (64.03, 0.53), "fdwsc": (60.06, 0.52),
        "ops_factor": {"fwsc": 5.6, "fdwsc": 6.0}, "ops_share_pct": 93.5,
    },
    "psmnet-3d": {
        "full": (127.12, 1.89), "fwsc": (19.06, 0.58), "fdwsc": (17.70, 0.57),
        "ops_factor": {"fwsc": 6.7, "fdwsc": 7.2}, "ops_share_pct": 68.6,
    },
}


def test_criterion_1_reference_totals_within_5_percent():
    t0 = time.perf_counter()
    checked = 0
    for name, ref in REFERENCE.items():
        cfg = _shipped(name)
        totals = {v: _totals(cfg, v) for v in ("full", "fwsc", "fdwsc")}
        for variant, (gmacs, params_m) in (
            (v, ref[v]) for v in ("full", "fwsc", "fdwsc")
        ):
            t = totals[variant]
            assert t.total_macs / 1e9 == pytest.approx(gmacs, rel=0.05), (name, variant, "gmacs")
            assert t.total_params / 1e6 == pytest.approx(params_m, rel=0.05), (name, variant, "params")
            checked += 2
        for variant, factor in ref["ops_factor"].items():
            got = totals["full"].total_macs / totals[variant].total_macs
            assert got == pytest.approx(factor, rel=0.05), (name, variant, "ops factor")
            checked += 1
        for variant, factor in ref.get("params_factor", {}).items():
            got = totals["full"].total_params / totals[variant].total_params
            assert got == pytest.approx(factor, rel=0.05), (name, variant, "params factor")
            checked += 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0, f"counting took {elapsed:.2f}s, budget 1s"
    print(f"criterion 1: PASS - {checked} reference values within 5% in {elapsed * 1e3:.0f}ms")


def test_criterion_2_ops_share_within_2_points():
    for name, ref in REFERENCE.items():
        cfg = _shipped(name)
        total = costs.count_network(cfg).total.total_macs
        share = 100.0 * total / (total + cfg.backbone.macs)
        assert abs(share - ref["ops_share_pct"]) <= 2.0, (name, share)
    print("criterion 2: PASS - all three ops shares within 2 percentage points")


def test_criterion_3_closed_form_equals_instrumented_loop():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0xACCE97)
    cases = 0
    for variant in ("full", "fwsc", "dwsc", "fdwsc"):
        combos = [
            (k, s, bias, bn)
            for k in (1, 3, 5)
            for s in (1, 2)
            for bias in (False, True)
            for bn in (False, True)
        ]
        combos += [tuple(combos[int(rng.integers(0, len(combos)))]) for _ in range(4)]
        for k, s, bias, bn in combos:
            hi = 4 if k == 5 else 5
            ci = int(rng.integers(1, 4))
            co = ci if variant == "dwsc" else int(rng.integers(1, 5))
            shape = Shape4(ci, *(int(rng.integers(2, hi)) for _ in range(3)))
            bank = KernelBank.random(
                variant, k, ci, co,
                d_in=shape.d if variant == "dwsc" else None,
                seed=int(rng.integers(0, 2**31)), bias=bias, bn=bn,
            )
            x = Volume4.random(shape, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
            _, mac = verify.loop_forward(variant, x, bank, s)
            spec = LayerSpec("c", "conv3d", variant, k, s, co, bias, bn)
            claimed = costs.count_layer(spec, shape).total_macs
            assert isinstance(mac, int) and mac == claimed, (
                f"{variant} k={k} s={s} bias={bias} bn={bn} {tuple(shape)}: "
                f"loop={mac} closed={claimed}"
            )
            cases += 1
    elapsed = time.perf_counter() - t0
    assert cases >= 100
    assert elapsed < 60.0, f"{elapsed:.1f}s, budget 60s"
    print(f"criterion 3: PASS - {cases} randomized layers, exact integer equality, {elapsed:.1f}s")


def test_criterion_4_analytic_gradients_within_1e_minus_4():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0x6BAD)
    worst = 0.0
    for variant in ("full", "fwsc", "dwsc", "fdwsc"):
        for case in range(20):
            k = int(rng.choice([1, 3]))
            s = int(rng.choice([1, 2]))
            ci = int(rng.integers(1, 3))
            co = ci if variant == "dwsc" else int(rng.integers(1, 3))
            shape = Shape4(ci, *(int(rng.integers(2, 4)) for _ in range(3)))
            bank = KernelBank.random(
                variant, k, ci, co,
                d_in=shape.d if variant == "dwsc" else None,
                seed=int(rng.integers(0, 2**31)),
                bias=bool(rng.integers(0, 2)), bn=bool(rng.integers(0, 2)),
            )
            x = Volume4.random(shape, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
            y = kernels.forward(x, bank, s)
            gin, grads = kernels.backward(x, bank, Volume4(np.ones(tuple(y.dims))), s)
            fd = verify.finite_diff_grad(x, bank, s)
            errs = [verify.max_rel_err(fd["input"], gin.array, floor=1e-6)]
            errs += [verify.max_rel_err(fd[n], g, floor=1e-6) for n, g in grads.items()]
            err = max(errs)
            worst = max(worst, err)
            assert err <= 1e-4, f"{variant} case {case}: rel err {err:.2e}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"{elapsed:.1f}s, budget 120s"
    print(f"criterion 4: PASS - 80 gradient cases, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_5_composition_identities():
    expected_tol = {
        "fwsc-vs-stages": 0.0,  # bit-exact
        "fdwsc-rank1-vs-fwsc": 1e-6,
        "fwsc-c1-vs-full": 1e-6,
        "dwsc-d1-vs-cube-conv": 1e-6,
        "k1-collapse": 1e-6,
    }
    assert set(expected_tol) == set(verify.COMPOSITION_CASES)
    worst = {}
    for case, tol in expected_tol.items():
        for seed in range(50):
            r = verify.composition_check(case, seed=seed)
            assert r.tol == tol, (case, r.tol)
            assert r.passed, str(r)
            if tol == 0.0:
                assert r.max_abs_err == 0.0, str(r)
            worst[case] = max(worst.get(case, 0.0), r.max_rel_err)
    summary = ", ".join(f"{c}={e:.1e}" for c, e in worst.items())
    print(f"criterion 5: PASS - 5 identities x 50 seeds; worst rel err per case: {summary}")


def test_criterion_6_reduction_law_is_exact_rational():
    shape = Shape4(1, 2, 3, 4)
    checked = 0
    for k in (1, 3, 5):
        for co in (1, 2, 3, 4, 5, 8, 16, 32, 64):
            for ci in (1, 2, 3, 7):
                sh = Shape4(ci, *shape[1:])
                full = costs.count_layer(
                    LayerSpec("f", "conv3d", "full", k, 1, co, False, False), sh
                ).total_macs
                fwsc = costs.count_layer(
                    LayerSpec("w", "conv3d", "fwsc", k, 1, co, False, False), sh
                ).total_macs
                assert Fraction(full, fwsc) == Fraction(k**3 * co, k**3 + co)
                checked += 1
    print(f"criterion 6: PASS - {checked} (k, c_i, c_o) points match k^3*c_o/(k^3+c_o) exactly")


def test_criterion_7_walltime_ordering():
    t0 = time.perf_counter()
    proc = subprocess.run(
        [
            sys.executable, "-m", "sepconv3d", "bench",
            "--compare", "full,fwsc,fdwsc",
            "--size", "32x48x60x132", "--k", "3", "--out-channels", "32",
            "--iters", "10", "--warmup", "1", "--format", "json",
        ],
        capture_output=True, text=True, timeout=300,
    )
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    med = {r["op"]: r["median_s"] for r in json.loads(proc.stdout)["results"]}
    ratio = med["full"] / med["fwsc"]
    assert ratio >= 3.0, f"full/fwsc median ratio {ratio:.2f} < 3.0 ({med})"
    assert med["fdwsc"] <= med["fwsc"], f"fdwsc {med['fdwsc']:.3f}s > fwsc {med['fwsc']:.3f}s"
    assert elapsed < 300.0, f"{elapsed:.0f}s, budget 300s"
    print(
        f"criterion 7: PASS - medians full={med['full']:.3f}s fwsc={med['fwsc']:.3f}s "
        f"fdwsc={med['fdwsc']:.3f}s (ratio {ratio:.2f}x) in {elapsed:.0f}s"
    )


def test_criterion_8_io_round_trip_and_format_agreement(tmp_path, capsys):
    # volume container round trip, both dtypes, re-serialization identical
    import io

    for dtype in (np.float32, np.float64):
        vol = Volume4.random((3, 4, 5, 6), seed=31, dtype=dtype)
        buf = io.BytesIO()
        write_sv3d(buf, vol.array)
        back = read_sv3d(io.BytesIO(buf.getvalue()))
        assert back.dtype == dtype
        assert np.array_equal(back, vol.array)
        buf2 = io.BytesIO()
        write_sv3d(buf2, back)
        assert buf2.getvalue() == buf.getvalue()

    # apply is deterministic: rerunning writes byte-identical output
    x = Volume4.random((32, 48, 32, 64), seed=8)
    vin = tmp_path / "in.sv3d"
    save_volume(vin, x)
    wpath = tmp_path / "w.json"
    kernels.save_bank(wpath, KernelBank.random("fwsc", 3, 32, 32, seed=6, bias=True))
    outs = []
    for tag in ("a", "b"):
        vout = tmp_path / f"{tag}.sv3d"
        code = cli.main([
            "apply", "--op", "fwsc", "--weights", str(wpath),
            "--input", str(vin), "--output", str(vout), "--stride", "2",
        ])
        assert code == 0
        outs.append(vout.read_bytes())
    assert outs[0] == outs[1]

    # the three report formats state the same numbers
    cfgp = str(resources.files("sepconv3d.configs").joinpath("ganet11-3d.json"))
    base_args = ["profile", "--config", cfgp, "--variant", "fdwsc", "--baseline", "full"]
    assert cli.main(base_args + ["--format", "json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert cli.main(base_args + ["--format", "csv"]) == 0
    csv_out = capsys.readouterr().out
    assert cli.main(base_args + ["--format", "table"]) == 0
    table_out = capsys.readouterr().out

    csv_tail = {
        line.split(",")[0]: line.rstrip("\n").split(",")[8]
        for line in csv_out.splitlines()[1:]
    }
    assert int(csv_tail["total"]) == rep["totals"]["macs"]
    assert float(csv_tail["gmacs"]) == rep["totals"]["gmacs"]
    assert float(csv_tail["reduction_ops"]) == rep["reduction_vs_full"]["ops"]
    assert float(csv_tail["share_ops_pct"]) == rep["share_of_network"]["ops_pct"]
    assert f"total: {rep['totals']['gmacs']:.2f} GMACs" in table_out
    assert f"ops {rep['reduction_vs_full']['ops']:.1f}x" in table_out
    assert f"ops {rep['share_of_network']['ops_pct']:.2f}%" in table_out
    print("criterion 8: PASS - container round-trips bit-exact, apply reruns byte-identical, formats agree")
