"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines and timings.  Criterion 7 (the multi-site-vs-single-site synthetic
experiment over 5 master seeds) dominates the runtime; everything else is
seconds-scale.
"""

import itertools
import math
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from cwtseg import ops
from cwtseg.arch import ArchitectureSpec, Conv, Relu, Sigmoid, compact_architecture
from cwtseg.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cwtseg.cli import _load_manifest, _test_sets, cmd_gen_data, cmd_train
from cwtseg.config import builtin_profile
from cwtseg.errors import ArchitectureMismatch, CheckpointError, NiftiParseError
from cwtseg.evaluate import evaluate_models
from cwtseg.network import build_network, cdc_loss, dice_loss
from cwtseg.nifti import parse_nifti, write_nifti
from cwtseg.phantom import SitePhantomParams, generate_phantom
from cwtseg.protocol import ConvergenceMonitor, TurnToken, init_msl, read_audit
from cwtseg.stats import dice, pearson, wilcoxon_signed_rank
from cwtseg.store import DirectoryStore
from cwtseg.volumes import SegmentationMask

from helpers import fd_gradient, rel_error, well_separated
from proto_helpers import (
    CrashingStore,
    SimulatedCrash,
    initial_ckpt,
    make_runtime,
    run_workers,
)
from cwtseg.protocol import run_site_worker, run_ssl

EXPERIMENT_SEEDS = (101, 202, 303, 404, 505)


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.start = 0.0

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        verdict = "PASS" if exc_type is None else "FAIL"
        print(f"\nACCEPTANCE {self.number} ({self.title}): {verdict} [{elapsed:.1f}s]")
        return False


# ---------------------------------------------------------------------- 1

def test_criterion_1_gradient_suite():
    """Every differentiable op and both losses vs central finite differences."""
    with _Criterion(1, "gradient suite, 100 randomized instances per op"):
        rng = np.random.default_rng(20240801)
        checks = {k: 0 for k in
                  ("conv_x", "conv_k", "conv_b", "relu", "sigmoid", "avg",
                   "max", "avgsame", "concat", "cdc", "dice")}
        tol = 1e-3
        for kind in checks:
            for _ in range(100):
                h, w = rng.integers(4, 7, size=2)
                if kind.startswith("conv"):
                    cin, cout = rng.integers(1, 3, size=2)
                    k = int(rng.choice([1, 3]))
                    x = rng.normal(size=(cin, h, w))
                    kern = rng.normal(size=(cout, cin, k, k))
                    bias = rng.normal(size=cout)
                    proj = rng.normal(size=(cout, h, w))
                    gx, gk, gb = ops.conv2d_backward(x, kern, proj)
                    if kind == "conv_x":
                        num = fd_gradient(
                            lambda v: float((ops.conv2d(v, kern, bias) * proj).sum()), x)
                        err = rel_error(gx, num)
                    elif kind == "conv_k":
                        num = fd_gradient(
                            lambda v: float((ops.conv2d(x, v, bias) * proj).sum()), kern)
                        err = rel_error(gk, num)
                    else:
                        num = fd_gradient(
                            lambda v: float((ops.conv2d(x, kern, v) * proj).sum()), bias)
                        err = rel_error(gb, num)
                elif kind in ("relu", "sigmoid"):
                    x = rng.normal(size=(2, h, w)) * 2
                    if kind == "relu":
                        x[np.abs(x) < 1e-3] = 0.3
                    proj = rng.normal(size=x.shape)
                    num = fd_gradient(
                        lambda v: float((ops.activation(v, kind) * proj).sum()), x)
                    err = rel_error(ops.activation_backward(x, kind, proj), num)
                elif kind in ("avg", "max"):
                    x = well_separated(rng, (2, h, w))
                    proj = rng.normal(size=(2, h // 2, w // 2))
                    num = fd_gradient(
                        lambda v: float((ops.pool2d(v, kind, 2) * proj).sum()), x)
                    err = rel_error(ops.pool2d_backward(x, kind, 2, proj), num)
                elif kind == "avgsame":
                    x = rng.normal(size=(1, h, w))
                    proj = rng.normal(size=x.shape)
                    num = fd_gradient(
                        lambda v: float((ops.avgpool_same(v, 3) * proj).sum()), x)
                    err = rel_error(ops.avgpool_same_backward(x, 3, proj), num)
                elif kind == "concat":
                    x = rng.normal(size=(3, h, w))
                    proj = rng.normal(size=(3, h, w))
                    num = fd_gradient(
                        lambda v: float(
                            (ops.concat_channels([v[:1], v[1:]]) * proj).sum()), x)
                    back = ops.concat_channels_backward(proj, [1, 2])
                    err = rel_error(np.concatenate(back), num)
                else:  # cdc / dice
                    loss_fn = cdc_loss if kind == "cdc" else dice_loss
                    truth = (rng.random(24) < 0.3).astype(np.float64)
                    pred = rng.uniform(0.05, 0.95, 24)
                    _, grad = loss_fn(pred, truth)
                    num = fd_gradient(lambda p: loss_fn(p, truth)[0], pred, step=1e-4)
                    err = rel_error(grad, num)
                assert err < tol, f"{kind}: relative error {err:.2e} >= {tol}"
                checks[kind] += 1
        assert all(v == 100 for v in checks.values())


# ---------------------------------------------------------------------- 2

def test_criterion_2_statistical_oracles():
    """dice/pearson/wilcoxon vs brute-force oracles at stated tolerances."""
    with _Criterion(2, "statistical oracles"):
        rng = np.random.default_rng(7)

        # dice vs voxel-by-voxel count enumeration, exact to 1e-12
        for _ in range(100):
            a = SegmentationMask((rng.random((4, 3, 2)) < 0.4).astype(np.uint8),
                                 (1, 1, 1))
            b = SegmentationMask((rng.random((4, 3, 2)) < 0.4).astype(np.uint8),
                                 (1, 1, 1))
            na = nb = inter = 0
            for x in range(4):
                for y in range(3):
                    for z in range(2):
                        na += int(a.voxels[x, y, z])
                        nb += int(b.voxels[x, y, z])
                        inter += int(a.voxels[x, y, z] and b.voxels[x, y, z])
            expected = 1.0 if na + nb == 0 else 2 * inter / (na + nb)
            assert abs(dice(a, b) - expected) <= 1e-12

        # pearson vs closed-form evaluation, to 1e-12
        for _ in range(100):
            n = int(rng.integers(3, 10))
            x = rng.normal(size=n)
            y = rng.normal(size=n)
            mx, my = sum(x) / n, sum(y) / n
            num = sum((xi - mx) * (yi - my) for xi, yi in zip(x, y))
            den = math.sqrt(sum((xi - mx) ** 2 for xi in x)
                            * sum((yi - my) ** 2 for yi in y))
            assert abs(pearson(x, y) - num / den) <= 1e-12

        # wilcoxon exact p vs full 2^n sign enumeration for n <= 10, exactly
        def enum_p(diffs):
            diffs = [d for d in diffs if d != 0.0]
            ranks = []
            for d in diffs:
                less = sum(1 for e in diffs if abs(e) < abs(d))
                equal = sum(1 for e in diffs if abs(e) == abs(d))
                ranks.append(less + (equal + 1) / 2.0)
            observed = abs(sum(math.copysign(r, d) for r, d in zip(ranks, diffs)))
            hits = sum(
                1 for signs in itertools.product((-1.0, 1.0), repeat=len(ranks))
                if abs(sum(s * r for s, r in zip(signs, ranks))) >= observed - 1e-9
            )
            return hits / 2 ** len(ranks)

        for _ in range(60):
            n = int(rng.integers(1, 11))
            diffs = np.round(rng.normal(size=n), 1)
            if not np.any(diffs != 0):
                diffs = np.array([0.4])
            pairs = [(f"c{i}", d, 0.0) for i, d in enumerate(diffs)]
            _, p = wilcoxon_signed_rank(pairs)
            assert p == enum_p(diffs)


# ------------------------------------------------------------------ 3 & 7

@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """Five-seed CI-profile experiment shared by criteria 3 and 7."""
    results = []
    for seed in EXPERIMENT_SEEDS:
        root = tmp_path_factory.mktemp(f"exp_{seed}")
        data, out, store = root / "data", root / "out", root / "store"
        cmd_gen_data(builtin_profile("ci", seed), data)
        assert cmd_train(builtin_profile("ci", seed), "ssl", data, out,
                         site="site_a") == 0
        assert cmd_train(builtin_profile("ci", seed), "ssl", data, out,
                         site="site_b") == 0
        assert cmd_train(builtin_profile("ci", seed), "msl", data, out,
                         store_path=str(store)) == 0
        cfg = builtin_profile("ci", seed)
        spec = cfg.arch_spec()
        named = []
        for name in ("ssl_site_a", "ssl_site_b", "msl"):
            net, _, _ = load_checkpoint((out / f"{name}.ckpt").read_bytes(), spec)
            named.append((name, net))
        report = evaluate_models(
            named, _test_sets(_load_manifest(data), data), cfg.threshold
        )
        results.append({
            "seed": seed,
            "store": store,
            "data": data,
            "pooled": dict(report.pooled_dice),
        })
    return results


def test_criterion_3_protocol_trace(experiment):
    """Audit alternation, contiguous epochs, one checkpoint per epoch,
    store holding only protocol artifacts, for a CI-profile MSL run."""
    with _Criterion(3, "protocol trace on a CI-profile MSL run"):
        for entry in experiment:
            store = DirectoryStore(entry["store"])
            audit = read_audit(store)
            assert len(audit) >= 2
            roster = ("site_a", "site_b")
            for i, (epoch, site, loss) in enumerate(audit):
                assert epoch == i, f"epoch indices not contiguous at {i}"
                assert site == roster[i % 2], f"alternation broken at epoch {i}"
                assert 0.0 <= loss <= 1.0
            names = store.list()
            epochs = sorted(int(n.split("_")[1]) for n in names
                            if n.startswith("checkpoints/epoch_"))
            assert epochs == list(range(len(audit)))  # exactly one per epoch
            for name in names:
                assert (
                    name == "token"
                    or name == "loss_log.csv"
                    or name == "checkpoints/init.ckpt"
                    or (name.startswith("checkpoints/epoch_")
                        and name.endswith(".ckpt"))
                ), f"foreign artifact in store: {name}"
            token = TurnToken.parse(store.get("token").decode())
            assert token.status == "converged"


def test_criterion_7_multisite_beats_single_site(experiment):
    """Directional claim: pooled MSL Dice >= the better SSL's pooled Dice in
    at least 4 of 5 seeds, and strictly greater on average."""
    with _Criterion(7, "synthetic multi-site vs single-site comparison"):
        wins = 0
        msl_scores, best_ssl_scores = [], []
        for entry in experiment:
            pooled = entry["pooled"]
            best_ssl = max(pooled["ssl_site_a"], pooled["ssl_site_b"])
            msl_scores.append(pooled["msl"])
            best_ssl_scores.append(best_ssl)
            if pooled["msl"] >= best_ssl:
                wins += 1
            print(f"  seed {entry['seed']}: msl={pooled['msl']:.4f} "
                  f"ssl_a={pooled['ssl_site_a']:.4f} "
                  f"ssl_b={pooled['ssl_site_b']:.4f}")
        print(f"  msl wins {wins}/5; mean msl={np.mean(msl_scores):.4f} "
              f"mean best-ssl={np.mean(best_ssl_scores):.4f}")
        assert wins >= 4
        assert float(np.mean(msl_scores)) > float(np.mean(best_ssl_scores))


# ---------------------------------------------------------------------- 4

def test_criterion_4_crash_tolerance(tmp_path):
    """Kill + restart a worker at each inter-store-operation point; the
    final audit sequence must match the uninterrupted run's."""
    with _Criterion(4, "crash tolerance at 3 inter-store-operation points"):
        roster = ("site_a", "site_b")
        seeds = dict(zip(roster, (101, 202)))

        def build(store, site, crashing=None):
            handle = (CrashingStore(store, crashing, after_calls=1)
                      if crashing else store)
            return make_runtime(site, roster, handle, seed=seeds[site],
                                patience=2, max_epochs=30)

        base = DirectoryStore(tmp_path / "base")
        init_msl(base, roster, initial_ckpt())
        run_workers([build(base, s) for s in roster])
        baseline = read_audit(base)
        assert len(baseline) >= 3

        for crash_at in ("checkpoint", "loss_log", "token"):
            store = DirectoryStore(tmp_path / f"crash_{crash_at}")
            init_msl(store, roster, initial_ckpt())

            import threading

            def work_a():
                try:
                    run_site_worker(build(store, "site_a", crashing=crash_at))
                except SimulatedCrash:
                    run_site_worker(build(store, "site_a"))  # restart

            def work_b():
                run_site_worker(build(store, "site_b"))

            threads = [threading.Thread(target=work_a),
                       threading.Thread(target=work_b)]
            for t in threads:
                t.start()
            for t in threads:
                t.join(120)
            assert read_audit(store) == baseline, f"audit diverged ({crash_at})"


# ---------------------------------------------------------------------- 5

def test_criterion_5_single_site_msl_equals_ssl(tmp_path):
    """MSL with a one-site roster produces bit-identical weights to SSL."""
    with _Criterion(5, "single-site MSL == SSL, bitwise"):
        from cwtseg.store import InMemoryStore

        roster = ("solo",)
        init_seed = 99
        store = InMemoryStore()
        init_msl(store, roster, initial_ckpt(init_seed))
        final_msl = run_site_worker(
            make_runtime("solo", roster, store, seed=77, patience=2, max_epochs=12)
        )
        final_ssl = run_ssl(
            make_runtime("solo", roster, None, seed=77, patience=2, max_epochs=12),
            init_seed=init_seed,
        )
        msl_ck = Checkpoint.from_bytes(final_msl)
        ssl_ck = Checkpoint.from_bytes(final_ssl)
        for name, tensor in ssl_ck.weight_tensors().items():
            assert tensor.tobytes() == msl_ck.tensors[name].tobytes(), name
        assert final_msl == final_ssl


# ---------------------------------------------------------------------- 6

def test_criterion_6_checkpoint_format():
    """Round-trip byte identity, corruption detection, hash rejection."""
    with _Criterion(6, "checkpoint format"):
        spec = ArchitectureSpec(1, (Conv(3, 3), Relu(), Conv(1, 1), Sigmoid()))
        net = build_network(spec, 5)
        blob = save_checkpoint(net, global_epoch=3,
                               site_history=[("a", 0, 0.5), ("b", 1, 0.4)])
        net2, _, ckpt = load_checkpoint(blob, spec)
        assert save_checkpoint(net2, global_epoch=3,
                               site_history=ckpt.site_history) == blob

        for offset in (0, 10, len(blob) // 2, len(blob) - 1):
            corrupted = bytearray(blob)
            corrupted[offset] ^= 0x01
            with pytest.raises(CheckpointError):
                load_checkpoint(bytes(corrupted), spec)

        with pytest.raises(ArchitectureMismatch):
            load_checkpoint(blob, compact_architecture())


# ---------------------------------------------------------------------- 8

def test_criterion_8_convergence_rule():
    """Constructed loss streams reproduce the strict-1e-4/patience-10 rule."""
    with _Criterion(8, "convergence rule boundary behavior"):
        # constant stream: fires exactly on the 10th stalled epoch
        m = ConvergenceMonitor(min_delta=1e-4, patience=10)
        fired_at = None
        for i in range(30):
            if m.update(0.5):
                fired_at = i
                break
        assert fired_at == 10

        # improvements of exactly 1e-4 count as NO improvement
        m = ConvergenceMonitor(min_delta=1e-4, patience=10)
        loss = 0.5
        m.update(loss)
        fired_at = None
        for i in range(1, 30):
            loss = 0.5 - 1e-4  # equals best - min_delta; strict rule stalls
            if m.update(loss):
                fired_at = i
                break
        assert fired_at == 10

        # improvements strictly greater than 1e-4 never converge
        m = ConvergenceMonitor(min_delta=1e-4, patience=10)
        loss = 1.0
        for _ in range(200):
            assert m.update(loss) is False
            loss -= 2e-4

        # interleaved: improvement anywhere in the stream resets the counter
        m = ConvergenceMonitor(min_delta=1e-4, patience=10)
        m.update(0.5)
        for _ in range(9):
            m.update(0.5)
        assert m.update(0.4) is False
        assert m.stall_count == 0


# ---------------------------------------------------------------------- 9

def test_criterion_9_nifti_roundtrip(experiment):
    """Every generated phantom survives write->parse exactly; malformed
    headers fail with field-named errors."""
    with _Criterion(9, "NIfTI round trip and header validation"):
        # all phantoms from the experiment data dirs
        checked = 0
        for entry in experiment[:2]:
            for path in sorted(Path(entry["data"]).rglob("*.nii")):
                original = path.read_bytes()
                vol = parse_nifti(original)
                assert parse_nifti(write_nifti(vol)).voxels.tobytes() \
                    == vol.voxels.tobytes()
                assert parse_nifti(write_nifti(vol)).spacing_mm == vol.spacing_mm
                checked += 1
        assert checked >= 20

        # fresh phantoms across parameter variations
        for seed in (1, 2):
            params = SitePhantomParams(
                "rt", 1, (48, 48, 6), (0.5, 0.5, 5.0), 400.0, 0.4, (1, 2),
                seed=seed,
            )
            vol, mask = generate_phantom(params, 0)
            back = parse_nifti(write_nifti(vol))
            assert back.dims == vol.dims
            assert back.spacing_mm == vol.spacing_mm
            assert back.voxels.tobytes() == vol.voxels.tobytes()
            mback = parse_nifti(write_nifti(mask))
            assert mback.voxels.astype(np.uint8).tobytes() == mask.voxels.tobytes()

        # malformed headers: each failure names the offending field
        good = write_nifti(
            generate_phantom(SitePhantomParams(
                "x", 1, (16, 16, 4), (0.5, 0.5, 5.0), 100.0, 0.3, (0, 0), seed=3
            ), 0)[0]
        )
        bad_magic = bytearray(good)
        bad_magic[344:348] = b"oops"
        with pytest.raises(NiftiParseError, match="magic"):
            parse_nifti(bytes(bad_magic))

        bad_dtype = bytearray(good)
        struct.pack_into("<h", bad_dtype, 70, 999)
        with pytest.raises(NiftiParseError, match="datatype"):
            parse_nifti(bytes(bad_dtype))

        bad_hdr = bytearray(good)
        struct.pack_into("<i", bad_hdr, 0, 17)
        with pytest.raises(NiftiParseError, match="sizeof_hdr"):
            parse_nifti(bytes(bad_hdr))

        with pytest.raises(NiftiParseError, match="truncated"):
            parse_nifti(good[:-10])
