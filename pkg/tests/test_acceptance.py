"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line in the terminal summary."""

import statistics
import time

import numpy as np
import pytest

from combreg import autodiff as ad
from combreg import harness, nets, ranking, synth, train
from combreg.autodiff import BatchNormState, Tensor
from combreg.harness import ExperimentConfig
from combreg.metrics import hausdorff, mean_surface_distance, overlap_metrics
from combreg.postproc import BinaryVolume, largest_connected_component, morphological_closing
from combreg.train import TrainConfig
from oracles import confusion, dense_hd_msd, flood_components, is_connected, numeric_grad, rel_error, set_close

FD_TOL = 1e-4
FD_INSTANCES = 20
FD_STEP = 1e-5
KINK_TOL = 1e-6
MAX_REDRAWS = 20


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# ------------------------------------------------------------ criterion 1
def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _worst_fd_error(fn, leaves, rng):
    """Backprop of sum(w * fn()) against central differences, worst relative error over ``leaves``.

    Returns None when the difference stencil straddles a kink (relu, max,
    clip): estimates at steps h and h/2 then disagree, and the instance is
    not a valid probe of the derivative.
    """
    out = fn()
    w = rng.normal(size=out.shape)
    for t in leaves:
        t.grad = None
    (out * Tensor(w)).sum().backward()
    worst = 0.0
    f = lambda: float((fn().data * w).sum())  # noqa: E731
    for t in leaves:
        num = numeric_grad(f, t.data, FD_STEP)
        if rel_error(numeric_grad(f, t.data, FD_STEP / 2), num) > KINK_TOL:
            return None
        worst = max(worst, rel_error(t.grad if t.grad is not None else np.zeros_like(t.data), num))
    return worst


def _op_cases():
    """name -> factory(rng) returning (fn, leaves)."""

    def binary(op, lo=-1.0, hi=1.0):
        def make(rng):
            a, b = _leaf(rng, 2, 3), _leaf(rng, 3, lo=lo, hi=hi)  # b broadcasts
            return (lambda: op(a, b)), [a, b]

        return make

    def unary(op, lo=-1.0, hi=1.0, shape=(2, 3, 4)):
        def make(rng):
            a = _leaf(rng, *shape, lo=lo, hi=hi)
            return (lambda: op(a)), [a]

        return make

    def conv(rng):
        stride, pad = rng.integers(1, 3), rng.integers(0, 2)
        x, k, b = _leaf(rng, 2, 2, 5, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
        return (lambda: ad.conv2d(x, k, b, int(stride), int(pad))), [x, k, b]

    def bn(rng):
        x, g, b = _leaf(rng, 3, 2, 3, 3), _leaf(rng, 2, lo=0.5, hi=1.5), _leaf(rng, 2)
        return (lambda: ad.batch_norm(x, g, b, "train", BatchNormState(2))), [x, g, b]

    def bn_eval(rng):
        s = BatchNormState(2)
        s.mean, s.var, s.initialized = rng.normal(size=2), rng.uniform(0.5, 2, 2), True
        x, g, b = _leaf(rng, 2, 2, 3, 3), _leaf(rng, 2), _leaf(rng, 2)
        return (lambda: ad.batch_norm(x, g, b, "eval", s)), [x, g, b]

    def concat(rng):
        a, b = _leaf(rng, 2, 1, 3, 3), _leaf(rng, 2, 2, 3, 3)
        return (lambda: ad.concat_channels(a, b)), [a, b]

    def dense(rng):
        x, w, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 2)
        return (lambda: ad.dense(x, w, b)), [x, w, b]

    return {
        "add": binary(lambda a, b: a + b),
        "sub": binary(lambda a, b: a - b),
        "mul": binary(lambda a, b: a * b),
        "div": binary(lambda a, b: a / b, lo=0.5, hi=2.0),
        "neg": unary(lambda a: -a),
        "log": unary(ad.log, lo=0.2, hi=2.0),
        "square": unary(ad.square),
        "clip": unary(lambda a: ad.clip(a, -0.5, 0.5)),
        "relu": unary(ad.relu),
        "leaky_relu": unary(lambda a: ad.leaky_relu(a, 0.2)),
        "sigmoid": unary(ad.sigmoid, lo=-4, hi=4),
        "softmax_channels": unary(ad.softmax_channels, lo=-3, hi=3, shape=(2, 4, 3, 3)),
        "sum": unary(lambda a: a.sum(axis=1)),
        "mean": unary(lambda a: a.mean(axis=(0, 2))),
        "reshape": unary(lambda a: a.reshape(4, 6)),
        "getitem": unary(lambda a: a[:, 1:, ::2]),
        "conv2d": conv,
        "maxpool2": unary(ad.maxpool2, shape=(2, 2, 4, 6)),
        "upsample2": unary(ad.upsample2, shape=(1, 2, 2, 3)),
        "concat_channels": concat,
        "global_max_pool": unary(ad.global_max_pool, shape=(2, 3, 3, 3)),
        "dense": dense,
        "batch_norm_train": bn,
        "batch_norm_eval": bn_eval,
    }


def _warm_ae(k, seed):
    p = nets.build_autoencoder(nets.AutoEncoderConfig(in_channels=k, depth=2, code_channels=3, base_channels=2), seed)
    nets.reconstruct(p, Tensor(np.random.default_rng(seed).random((4, k, 4, 4))), "train")
    return p


def _loss_cases():
    def seg_dice(rng):
        y = (rng.random((2, 2, 4, 4)) > 0.5).astype(float)
        p = _leaf(rng, 2, 2, 4, 4, lo=0.05, hi=0.95)
        return (lambda: train.dice_loss(p, y)), [p]

    def ae_dice(rng):
        y = (rng.random((3, 2, 4, 4)) > 0.5).astype(float)
        ae = _warm_ae(2, int(rng.integers(1 << 30)))
        leaves = [ae.tensors[k] for k in ("head.w", "head.b", "code.w", "enc0.bn.gamma")]
        return (lambda: train.dice_loss(nets.reconstruct(ae, Tensor(y), "train")[:, 1:], y)), leaves

    def shape(rng):
        ae = _warm_ae(2, int(rng.integers(1 << 30)))
        y = (rng.random((2, 2, 4, 4)) > 0.5).astype(float)
        p = _leaf(rng, 2, 2, 4, 4, lo=0.05, hi=0.95)
        return (lambda: train.shape_loss(p, y, ae)), [p]

    def disc(rng):
        f, r = _leaf(rng, 2, 1, 3, 3, lo=0.05, hi=0.95), _leaf(rng, 2, 1, 3, 3, lo=0.05, hi=0.95)
        return (lambda: train.disc_loss(f, r)), [f, r]

    def adv(rng):
        f = _leaf(rng, 2, 1, 3, 3, lo=0.05, hi=0.95)
        return (lambda: train.adv_loss(f)), [f]

    def combined(rng):
        seed = int(rng.integers(1 << 30))
        ae = _warm_ae(2, seed)
        disc_p = nets.build_discriminator(nets.DiscriminatorConfig(in_channels=4, depth=2, base_channels=2), seed)
        lab = rng.integers(0, 3, size=(2, 4, 4))
        y = np.stack([lab == c for c in range(3)], axis=1).astype(float)
        logits = rng.normal(size=(2, 3, 4, 4))
        p = Tensor(np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True), requires_grad=True)
        x = rng.normal(size=(2, 1, 4, 4))
        return (lambda: train.combined_loss(p, y, x, ae, disc_p, 1e-2, 0.5)), [p]

    return {"dice": seg_dice, "ae_dice": ae_dice, "shape": shape, "disc": disc, "adv": adv, "combined": combined}


@criterion(1, "gradient suite: every op and loss within 1e-4 of central differences")
def test_criterion_1_gradients(record_property):
    t0 = time.perf_counter()
    cases = {**_op_cases(), **_loss_cases()}
    worst, redraws = {}, {}
    for i, (name, make) in enumerate(cases.items()):
        rng = np.random.default_rng(1000 + i)
        errs = []
        redraws[name] = 0
        while len(errs) < FD_INSTANCES and redraws[name] <= MAX_REDRAWS:
            err = _worst_fd_error(*make(rng), rng)
            if err is None:
                redraws[name] += 1
            else:
                errs.append(err)
        assert len(errs) == FD_INSTANCES, f"{name}: too many kink-straddling instances"
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    record_property(
        "detail",
        f"{len(cases)} ops/losses x {FD_INSTANCES}, max rel err {max(worst.values()):.1e}, "
        f"{sum(redraws.values())} kink redraws, {elapsed:.0f}s",
    )
    bad = {k: v for k, v in worst.items() if not v < FD_TOL}
    assert not bad, bad
    assert elapsed < 60


# ------------------------------------------------------------ criterion 2
@criterion(2, "metric oracle suite: 200 random pairs vs confusion and brute-force oracles")
def test_criterion_2_metric_oracles(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        shape = tuple(rng.integers(1, 17, size=3))
        g = rng.random(shape) < rng.uniform(0.02, 0.6)
        p = rng.random(shape) < rng.uniform(0.02, 0.6)
        spacing = tuple(rng.uniform(0.2, 4.0, size=3))
        tp, fp, fn, tn = confusion(g, p)
        d, s, sp = overlap_metrics(g, p)
        assert d == (2 * tp / (2 * tp + fp + fn) if tp + fn else None)
        assert s == (tp / (tp + fn) if tp + fn else None)
        assert sp == (tn / (tn + fp) if tn + fp else None)
        hd, msd = dense_hd_msd(g, p, spacing)
        got_hd, got_msd = hausdorff(g, p, spacing), mean_surface_distance(g, p, spacing)
        if hd is None:
            assert got_hd is None and got_msd is None
            continue
        worst = max(worst, abs(got_hd - hd), abs(got_msd - msd))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max distance error {worst:.1e} mm, {elapsed:.0f}s")
    assert worst <= 1e-9
    assert elapsed < 120


# ------------------------------------------------------------ criterion 3
@criterion(3, "ranking fidelity: threshold table endpoints and midpoints")
def test_criterion_3_ranking(record_property):
    expect = [
        ("dice", 100, 100),
        ("dice", 80, 0),
        ("dice", 60, 0),
        ("hd", 30, 0),
        ("hd", 50, 0),
        ("msd", 4, 0),
        ("msd", 7, 0),
        ("ravd", 10, 0),
        ("ravd", 25, 0),
        ("dice", 90, 50),
        ("hd", 15, 50),
    ]
    got = [(m, v, ranking.metric_to_score(v, m)) for m, v, _ in expect]
    record_property("detail", ", ".join(f"{m} {v}->{s:g}" for m, v, s in got))
    for (_, _, want), (_, _, score) in zip(expect, got):
        assert score == want


# ------------------------------------------------------------ criterion 4
@criterion(4, "power analysis: (87.1, 9.5) vs (82.8, 12.2) gives n in [76, 80]")
def test_criterion_4_power(record_property):
    n = ranking.required_sample_size(87.1, 9.5, 82.8, 12.2, alpha=0.05, power=0.8)
    record_property("detail", f"n = {n}")
    assert 76 <= n <= 80


# ------------------------------------------------------------ criterion 5
@criterion(5, "degenerate combined run is bit-identical to the baseline")
def test_criterion_5_degenerate(record_property):
    cases = synth.generate_dataset(5, 2, 3, (8, 32, 32))
    data = train.make_slices(cases, "multi")
    small = dict(depth=2, base_channels=4, code_channels=8, batch_size=4, epochs=2, lr_main=1e-3, seed=5)
    base = train.train_main(data, TrainConfig(regularization="base", **small))
    F = train.train_autoencoder(data, TrainConfig(**small)).params
    cfg = TrainConfig(regularization="combined", lambda1=0.0, lambda2=0.0, **small)
    degenerate = train.train_main(data, cfg, params_F=F, adv_stub=True)
    record_property("detail", f"{len(base.trajectory)} batch losses compared")
    assert base.trajectory == degenerate.trajectory
    for (_, a), (_, b) in zip(base.params_S.state_arrays(), degenerate.params_S.state_arrays()):
        assert np.array_equal(a, b)


# ------------------------------------------------------------ criterion 6
@criterion(6, "auto-encoder reconstruction Dice >= 0.95 on 20 training mask sets")
def test_criterion_6_autoencoder(record_property):
    t0 = time.perf_counter()
    cases = synth.generate_dataset(0, 20, 3)
    data = train.make_slices(cases, "multi")
    result = train.train_autoencoder(data, TrainConfig(lr_ae=1e-2))
    score = train.reconstruction_dice(result.params, data)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"reconstruction Dice {score:.4f}, {elapsed:.0f}s")
    assert score >= 0.95
    assert elapsed < 180


# ------------------------------------------------------------ criterion 7
DESK_TRAIN = {"lr_main": 3e-3}


@pytest.mark.slow
@criterion(7, "desk LOOCV, multi strategy: CombReg Dice >= 0.85 and >= BaseUNet - 0.02")
def test_criterion_7_desk_benchmark(record_property, tmp_path):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(
        seed=0,
        n_cases=12,
        num_classes=3,
        extents=(16, 64, 64),
        grid=(("base", "multi"), ("combined", "multi")),
        train=DESK_TRAIN,
        outdir=str(tmp_path),
    )
    result = harness.run_loocv(cfg)
    harness.emit_reports(result.folds, tmp_path, result.methods())
    dice = {}
    for method in result.methods():
        folds = [f for f in result.folds if f.method == method]
        assert all(f.ok for f in folds), [f.error for f in folds if not f.ok]
        dice[method] = statistics.fmean(next(r.dice for r in f.reports if r.structure == "global") for f in folds)
    comb, base = dice["CombReg-MULTI"], dice["BaseUNet-MULTI"]
    elapsed = time.perf_counter() - t0
    record_property("detail", f"CombReg {comb:.4f}, BaseUNet {base:.4f}, {elapsed / 60:.1f} min")
    assert comb >= 0.85
    assert comb >= base - 0.02
    assert elapsed < 45 * 60


# ------------------------------------------------------------ criterion 8
@criterion(8, "post-processing: 1000 randomized LCC and closing checks")
def test_criterion_8_postprocessing(record_property):
    rng = np.random.default_rng(8)
    violations = []
    for i in range(500):
        shape = tuple(rng.integers(1, 8, size=3))
        m = rng.random(shape) < rng.uniform(0.05, 0.6)
        conn = int(rng.choice([6, 18, 26]))
        out = largest_connected_component(m, conn)
        comps = flood_components(m, conn)
        got = {tuple(int(v) for v in p) for p in zip(*np.nonzero(out))}
        ok = not np.any(out & ~m)  # subset
        ok &= is_connected(got, conn, shape)
        if comps:
            biggest = max(len(c) for c in comps)
            ok &= len(got) == biggest and any(got == {tuple(int(v) for v in p) for p in c} for c in comps)
        else:
            ok &= not got
        ok &= np.array_equal(largest_connected_component(out, conn), out)
        if not ok:
            violations.append(("lcc", i))
    for i in range(500):
        shape = tuple(rng.integers(1, 7, size=3))
        b = rng.random(shape) < rng.uniform(0.05, 0.6)
        a = b & (rng.random(shape) < 0.7)
        r = int(rng.integers(1, 3))
        ca, cb = morphological_closing(a, r), morphological_closing(b, r)
        ok = not np.any(a & ~ca)  # extensive
        ok &= not np.any(ca & ~cb)  # increasing
        ok &= np.array_equal(morphological_closing(ca, r), ca)  # idempotent
        ok &= np.array_equal(ca, set_close(a, r))
        if not ok:
            violations.append(("closing", i))
    record_property("detail", f"1000 checks, {len(violations)} violations")
    assert not violations, violations[:10]


# ------------------------------------------------------------ criterion 9
@criterion(9, "strategy algebra on 50 random label volumes")
def test_criterion_9_strategy_algebra(record_property):
    rng = np.random.default_rng(9)
    for _ in range(50):
        c = int(rng.integers(1, 6))
        shape = tuple(rng.integers(1, 9, size=3))
        labels = rng.integers(0, c + 1, size=shape).astype(np.uint8)
        multi = synth.encode_label_volume(labels, c, "multi")
        glob = synth.encode_label_volume(labels, c, "global")
        ind = synth.encode_label_volume(labels, c, "individual")
        assert np.array_equal(multi[:, 1:].max(axis=1), glob[:, 0])
        # individual predictions united equal the global transform of the same prediction
        vols = [BinaryVolume(ind[:, k].astype(bool)) for k in range(c)]
        union = harness.union_masks(vols, shape, (1.0, 1.0, 1.0))
        assert np.array_equal(union.mask, glob[:, 0].astype(bool))
        # multi-head argmax masks united equal the global transform of the argmax label map
        probs = rng.random((shape[0], c + 1) + shape[1:])
        hard = harness.masks_from_probabilities(probs, "multi")
        argmax_labels = probs.argmax(axis=1).astype(np.uint8)
        assert np.array_equal(hard.any(axis=1), synth.encode_label_volume(argmax_labels, c, "global")[:, 0].astype(bool))
    record_property("detail", "50 volumes")


# ----------------------------------------------------------- criterion 10
TINY_TRAIN = dict(epochs=1, depth=2, base_channels=4, code_channels=8, disc_depth=2, disc_base_channels=4, batch_size=4)


@criterion(10, "determinism: two full grid runs give byte-identical reports")
def test_criterion_10_determinism(record_property, tmp_path):
    outputs = []
    for run, workers in (("a", 1), ("b", 2)):
        cfg = ExperimentConfig(seed=10, n_cases=3, num_classes=2, extents=(8, 32, 32), train=TINY_TRAIN, outdir=str(tmp_path / run), parallel_folds=workers)
        result = harness.run_loocv(cfg)
        paths = harness.emit_reports(result.folds, cfg.outdir, result.methods())
        outputs.append({name: paths[name].read_bytes() for name in ("metrics.csv", "leaderboard.csv")})
    record_property("detail", f"12 methods x 3 folds, {sum(len(b) for b in outputs[0].values())} bytes compared")
    assert outputs[0] == outputs[1]
