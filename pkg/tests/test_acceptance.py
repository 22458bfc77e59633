"""Exit criteria, one test per criterion; each prints a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the summary lines.
"""
import time

import numpy as np

from nbnnda import io
from nbnnda.adaptation import (TransferSpec, adapted_counts, build_adapted_classifier, merged_pools,
                               sample_source)
from nbnnda.features import GrayImage, augment10, crop_recipe, hflip
from nbnnda.harness import ProtocolConfig, multi_source_grid, run_experiment
from nbnnda.nbnn import Classifier, SupportSet, classify, classify_batch
from nbnnda.nn_index import NNIndex
from nbnnda.synth import ImageShiftSpec, ShiftSpec, gen_image_domains, gen_pair, gen_target, oracle_nbnn
from nbnnda.types import ClassPool, DescriptorBag, DomainDataset, pool_by_class


def verdict(n, name, ok, detail=""):
    print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {name}  {detail}")
    return ok


def _warm_up():
    rng = np.random.default_rng(0)
    for backend in ("brute", "kdtree"):
        NNIndex(rng.normal(size=(40, 3)), backend).query(rng.normal(size=(2, 3)))


def test_01_nn_oracle_equivalence():
    _warm_up()
    rng = np.random.default_rng(101)
    failures, t0 = [], time.perf_counter()
    for k in range(20):
        n = [10, 500, 2000][k % 3]
        dim = [2, 8, 64][(k // 3) % 3]
        pts = rng.normal(size=(n, dim))
        if k % 4 == 0:
            pts[n // 2:] = pts[: n - n // 2]  # duplicated points exercise the tie rule
        qs = rng.normal(size=(200, dim))
        qs[:20] = pts[rng.integers(0, n, 20)]
        kd = NNIndex(pts, "kdtree").query(qs)
        br = NNIndex(pts, "brute").query(qs)
        if not np.array_equal(kd[0], br[0]):
            failures.append(f"instance {k}: ids differ")
        scale = np.maximum(np.abs(br[1]), 1e-300)
        if np.any(np.abs(kd[1] - br[1]) > 1e-6 * scale):
            failures.append(f"instance {k}: distances differ")
    elapsed = time.perf_counter() - t0
    ok = verdict(1, "kd-tree == brute force (20 instances)", not failures and elapsed < 10.0,
                 f"{elapsed:.2f}s {failures[:3]}")
    assert ok


def test_02_nbnn_oracle_equivalence():
    rng = np.random.default_rng(202)
    bad, t0 = [], time.perf_counter()
    for k in range(10):
        n_classes = int(rng.integers(2, 6))
        dim = int(rng.choice([4, 16, 64]))
        centres = rng.normal(scale=0.5, size=(n_classes, dim))
        pools = {c: centres[c - 1] + rng.normal(size=(int(rng.integers(50, 501)), dim))
                 for c in range(1, n_classes + 1)}
        labels = rng.integers(1, n_classes + 1, size=int(rng.integers(20, 101)))
        bags = [DescriptorBag(centres[c - 1] + rng.normal(size=(int(rng.integers(1, 12)), dim)), int(c))
                for c in labels]
        variant = "l2sq" if k % 2 == 0 else "l2"
        supports = {c: SupportSet.build(ClassPool(c, p, np.zeros(len(p), np.int16), ("target",),
                                                  np.zeros(len(p), np.int64))) for c, p in pools.items()}
        clf = Classifier(supports, dim, variant)
        preds, mat = oracle_nbnn(bags, pools, variant)
        got = classify_batch(bags, clf)
        if got.predictions != preds:
            bad.append(f"instance {k}: predictions differ")
        d = np.array([[r.distances[c] for c in sorted(pools)] for r in got.results])
        if not np.allclose(d, mat, rtol=1e-9, atol=0):
            bad.append(f"instance {k}: I2C distances differ")
    elapsed = time.perf_counter() - t0
    ok = verdict(2, "NBNN == explicit-loop oracle (10 instances)", not bad and elapsed < 30.0,
                 f"{elapsed:.2f}s {bad[:3]}")
    assert ok


def test_03_subset_bag_zero_positive_distance():
    rng = np.random.default_rng(303)
    failures = 0
    for _ in range(100):
        n_classes = int(rng.integers(2, 6))
        dim = int(rng.integers(1, 10))
        pools = {c: rng.normal(size=(int(rng.integers(5, 60)), dim)) for c in range(1, n_classes + 1)}
        c = int(rng.integers(1, n_classes + 1))
        take = rng.choice(len(pools[c]), size=int(rng.integers(1, len(pools[c]) + 1)), replace=False)
        bag_desc = pools[c][take]
        if rng.uniform() < 0.3:  # plant the bag in another class too: the tie rule decides
            other = int(rng.integers(1, n_classes + 1))
            pools[other] = np.vstack([pools[other], bag_desc])
        expected = min(k for k, p in pools.items() if all((p == f).all(1).any() for f in bag_desc))
        ds = DomainDataset("t", tuple(pools), tuple(DescriptorBag(p, k, image_id=str(k)) for k, p in pools.items()),
                           dim)
        r = classify(DescriptorBag(bag_desc, c), Classifier.from_dataset(ds))
        failures += not (r.positive_distance == 0.0 and r.predicted == expected)
    ok = verdict(3, "subset bag -> positive distance 0, predicted class", failures == 0,
                 f"{failures} failures / 100")
    assert ok


def test_04_adaptation_determinism_and_accounting():
    spec = ShiftSpec(n_classes=5, dim=16, descriptors_per_image=30, seed=44)
    src, lab, _ = gen_pair(spec)
    problems = []
    a = merged_pools(lab, [src], TransferSpec(0.3, 9))
    b = merged_pools(lab, [src], TransferSpec(0.3, 9))
    for c in a:
        if a[c].descriptors.tobytes() != b[c].descriptors.tobytes() or not np.array_equal(a[c].origin, b[c].origin):
            problems.append(f"class {c} not bit-identical")
    clf = build_adapted_classifier(lab, [src], TransferSpec(0.3, 9))
    for c, counts in adapted_counts(clf).items():
        if counts.total != len(clf.supports[c]):
            problems.append(f"class {c} accounting")
    prev = None
    for rho in (0.1, 0.2, 0.5, 1.0):
        cur = sample_source(src, TransferSpec(rho, 9))
        if prev is not None:
            for c in cur:
                if not set(prev[c].ids.tolist()) <= set(cur[c].ids.tolist()):
                    problems.append(f"nesting fails at rho={rho} class {c}")
        prev = cur
    ok = verdict(4, "adaptation determinism, accounting, nesting", not problems, str(problems[:3]))
    assert ok


def test_05_rho_zero_is_no_op():
    spec = ShiftSpec(n_classes=10, dim=32, separation=2.0, descriptors_per_image=20, target_test_per_class=50,
                     seed=55)
    src, lab, test = gen_pair(spec)
    assert len(test) == 500
    plain = classify_batch(test.bags, Classifier.from_dataset(lab)).predictions
    adapted = classify_batch(test.bags, build_adapted_classifier(lab, [src], TransferSpec(0.0, 5))).predictions
    ok = verdict(5, "rho=0 adapted == target-only on 500 bags", plain == adapted)
    assert ok


# generator spec pinned after calibration: 4-sigma separation saturates both arms at 100%
GAIN_SPEC = dict(n_classes=10, dim=64, separation=2.0, shift=1.0, kappa=1.0, descriptors_per_image=50,
                 source_images_per_class=20, target_labeled_per_class=3, target_test_per_class=10)


def test_06_synthetic_adaptation_gain():
    t0 = time.perf_counter()
    gains = []
    for seed in range(10):
        src, lab, test = gen_pair(ShiftSpec(seed=seed, **GAIN_SPEC))
        base = classify_batch(test.bags, build_adapted_classifier(lab, [src], TransferSpec(0.0, seed))).accuracy
        adapted = classify_batch(test.bags, build_adapted_classifier(lab, [src], TransferSpec(0.2, seed))).accuracy
        gains.append(adapted - base)
    elapsed = time.perf_counter() - t0
    mean_gain = 100 * float(np.mean(gains))
    positive = sum(g > 0 for g in gains)
    ok = verdict(6, "synthetic gain rho=0.2 vs 0", mean_gain > 2.0 and positive >= 8 and elapsed < 300,
                 f"mean gain {mean_gain:.1f} pts, {positive}/10 positive, {elapsed:.1f}s")
    assert ok


def test_07_augmentation_contract_and_direction():
    rng = np.random.default_rng(7)
    img = GrayImage(rng.uniform(size=(192, 256)))
    aug = augment10(img)
    contract = (len(aug.variants) == 10 and aug.recipe == crop_recipe(256, 192)
                and all(np.array_equal(hflip(hflip(v)).pixels, v.pixels) for v in aug.variants)
                and all(np.array_equal(aug.variants[2 * k + 1].pixels, hflip(aug.variants[2 * k]).pixels)
                        for k in range(5)))
    src, tgt = gen_image_domains(ImageShiftSpec(seed=0), augment=True, stride=32)
    cfg = ProtocolConfig(seeds=list(range(1, 11)))
    none0 = run_experiment(cfg.with_(augment_mode="none", rho=0.0), [src], tgt)
    both = run_experiment(cfg.with_(augment_mode="both", rho=0.2), [src], tgt)
    ok = verdict(7, "augment10 contract; both@0.2 >= none@0", contract and both.mean >= none0.mean,
                 f"contract={contract} both={both.mean:.3f} none={none0.mean:.3f}")
    assert ok


def test_08_binary_roundtrip():
    rng = np.random.default_rng(808)
    bad = 0
    for k in range(25):
        dim = int(rng.integers(1, 70))
        ids = ["", "x" * io.MAX_ID_BYTES, "ünïcødé", f"img{k}"]
        bags = [DescriptorBag(rng.normal(scale=10.0 ** rng.integers(-3, 4), size=(int(rng.integers(1, 20)), dim)),
                              int(rng.integers(1, 2**32)), image_id=ids[i % 4]) for i in range(int(rng.integers(1, 9)))]
        ds = DomainDataset("d", tuple(sorted({b.label for b in bags})), tuple(bags), dim)
        first = io.encode_dataset(ds)
        bad += first != io.encode_dataset(io.decode_dataset(first))
    ok = verdict(8, "NBD1 write->read->write byte-identical", bad == 0, f"{bad} mismatches / 25")
    assert ok


def test_09_multi_source_accounting_and_grid():
    spec = ShiftSpec(n_classes=5, dim=16, descriptors_per_image=37, source_images_per_class=9, seed=99)
    src, lab, _ = gen_pair(spec)
    half_a = src.subset(src.bags[0::2], name="A")
    half_b = src.subset(src.bags[1::2], name="B")
    per_class = True
    for rho in (0.1, 0.2, 0.3, 0.5, 1.0):
        one = adapted_counts(build_adapted_classifier(lab, [src], TransferSpec(rho, 3)))
        two = adapted_counts(build_adapted_classifier(lab, [half_a, half_b], TransferSpec(rho, 3)))
        per_class &= all(abs(sum(one[c].n_source.values()) - sum(two[c].n_source.values())) <= 1 for c in one)
    domains = []
    for k, name in enumerate(("amazon", "webcam", "dslr")):
        t = gen_target(ShiftSpec(n_classes=4, dim=16, separation=2.0, shift=float(k), descriptors_per_image=10,
                                 source_images_per_class=0, target_labeled_per_class=8, target_test_per_class=4,
                                 seed=k))
        domains.append(t.subset(t.bags, name=name))
    cfg = ProtocolConfig(n_source_per_class=5, n_source_overrides={"webcam": 4}, seeds=[1, 2, 3])
    reports = multi_source_grid(cfg, domains)
    grid_ok = len(reports) == 3 and all(r.complete and len(r.trials) == 3 for r in reports)
    ok = verdict(9, "multi-source accounting; 3-choose-2 grid", per_class and grid_ok,
                 f"per_class={per_class} grid={[('+'.join(r.sources), r.target, round(r.mean, 3)) for r in reports]}")
    assert ok


PERF_BUDGET_S = 60.0


def test_10_performance_floor():
    """1000 bags x 100 descriptors vs 10 classes x 20k descriptors, kdtree, one thread, < 60 s.

    The run stops once the budget is spent (the criterion has failed by then)
    and reports the projected total.
    """
    spec = ShiftSpec(n_classes=10, dim=64, descriptors_per_image=100, target_labeled_per_class=200,
                     target_test_per_class=100, source_images_per_class=0, seed=1010)
    _, lab, test = gen_pair(spec)
    assert all(len(p) == 20000 for p in pool_by_class(lab).values()) and len(test) == 1000
    bags = list(test.bags)
    _warm_up()
    t0 = time.perf_counter()
    clf = Classifier.from_dataset(lab, backend="kdtree", threads=1)
    done, preds = 0, []
    chunk = 10
    while done < len(bags):
        preds += classify_batch(bags[done:done + chunk], clf).predictions
        done = min(done + chunk, len(bags))
        if time.perf_counter() - t0 > PERF_BUDGET_S:
            break
    elapsed = time.perf_counter() - t0
    projected = elapsed * len(bags) / done
    sample = bags[:min(done, 40)]
    parallel = classify_batch(sample, Classifier.from_dataset(lab, backend="kdtree", threads=4)).predictions
    same = parallel == preds[:len(sample)]
    finished = done == len(bags)
    verdict(10, "classify_batch perf floor (kdtree, 1 thread)", finished and elapsed < PERF_BUDGET_S and same,
                 f"{done}/{len(bags)} bags in {elapsed:.1f}s, projected {projected:.0f}s; parallel identical={same}")
    assert same, "parallel predictions differ from sequential"
    assert finished and elapsed < PERF_BUDGET_S, (
        f"only {done}/{len(bags)} bags within {PERF_BUDGET_S:.0f}s (projected {projected:.0f}s)")
