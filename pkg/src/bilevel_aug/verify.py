"""Independent numerical oracles used by the test suite and `cli verify`.

Everything here avoids the tape's backward pass on purpose: gradients are
checked against central finite differences of plain forward evaluations,
and the engine's hypergradients against closed forms or FD of the whole
train-then-validate procedure.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T


def finite_diff_gradients(f, arrays, step=1e-5):
    """Central finite differences of scalar ``f(list_of_arrays)``.

    Returns one gradient array per input. Inputs should be float64 for the
    stated tolerances to be meaningful.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(arrays)
            flat[i] = orig - step
            fm = f(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    """max |analytic - numeric| / (|analytic| + 1e-8), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def check_gradients(build, arrays, step=1e-5):
    """Compare tape gradients of ``build`` against finite differences.

    ``build`` maps a list of Tensors to a scalar Tensor; ``arrays`` are the
    float64 input values. Returns the max relative error over all inputs.
    """

    def scalar(vals):
        ts = [T.Tensor(v) for v in vals]
        return build(ts).item()

    with T.Tape() as tape:
        ts = [T.Tensor(a) for a in arrays]
        for t in ts:
            tape.watch(t)
        out = build(ts)
        gs = T.grad(out, ts)
    fd = finite_diff_gradients(scalar, [a.copy() for a in arrays], step=step)
    return max(
        max_relative_error(g.data, f) for g, f in zip(gs, fd)
    )


def _away_from(x, points, margin):
    """Push values of ``x`` out of ``margin`` of any point in ``points``."""
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + margin * np.sign(x - p + 1e-12) * 2, x)
    return x


def primitive_gradient_suite(points=100, seed=0, step=1e-5):
    """FD-check every differentiable primitive at random points.

    Returns a list of (name, max_rel_err) pairs; the stated contract is
    max_rel_err < 1e-5 for each primitive in 64-bit. Inputs and probe
    cotangents are drawn from positive ranges so gradient entries stay
    bounded away from zero: with step 1e-5, entries near zero by
    cancellation would be dominated by float64 roundoff rather than by
    either gradient path, which is what "well-conditioned points" excludes.
    """
    rng = np.random.default_rng(seed)
    results = []

    def rnd(*shape, lo=0.5, hi=1.5):
        return rng.uniform(lo, hi, size=shape).astype(np.float64)

    def run(name, build, make_inputs):
        worst = 0.0
        for _ in range(points):
            arrays = make_inputs()
            err = check_gradients(build, arrays, step=step)
            worst = max(worst, err)
        results.append((name, worst))

    def probe(shape):
        # fixed positive cotangent: probes every output while keeping
        # product-rule gradient entries bounded away from zero
        return T.Tensor(rng.uniform(0.5, 1.5, size=shape))

    r23 = probe((2, 3))

    run("add", lambda ts: T.tsum(T.mul(T.add(ts[0], ts[1]), r23)),
        lambda: [rnd(2, 3), rnd(2, 3)])
    run("add_broadcast", lambda ts: T.tsum(T.mul(T.add(ts[0], ts[1]), r23)),
        lambda: [rnd(2, 3), rnd(1, 3)])
    run("sub", lambda ts: T.tsum(T.mul(T.sub(ts[0], ts[1]), r23)),
        lambda: [rnd(2, 3), rnd(2, 3)])
    run("mul", lambda ts: T.tsum(T.mul(T.mul(ts[0], ts[1]), r23)),
        lambda: [rnd(2, 3), rnd(2, 3)])
    run("div", lambda ts: T.tsum(T.mul(T.div(ts[0], ts[1]), r23)),
        lambda: [rnd(2, 3), rnd(2, 3)])
    run("neg", lambda ts: T.tsum(T.mul(T.neg(ts[0]), r23)), lambda: [rnd(2, 3)])
    run("relu", lambda ts: T.tsum(T.mul(T.relu(ts[0]), r23)),
        lambda: [_away_from(rng.uniform(-1.5, 1.5, (2, 3)), [0.0], 0.05)])
    run("tanh", lambda ts: T.tsum(T.mul(T.tanh(ts[0]), r23)), lambda: [rnd(2, 3)])
    run("exp", lambda ts: T.tsum(T.mul(T.exp(ts[0]), r23)), lambda: [rnd(2, 3)])
    run("log", lambda ts: T.tsum(T.mul(T.log(ts[0]), r23)),
        lambda: [rnd(2, 3, lo=0.2, hi=3.0)])
    run("clamp", lambda ts: T.tsum(T.mul(T.clamp(ts[0], -1.0, 1.0), r23)),
        lambda: [_away_from(rng.uniform(-2, 2, (2, 3)), [-1.0, 1.0], 0.05)])
    run("floor_mod", lambda ts: T.tsum(T.mul(T.floor_mod(ts[0], 2 * np.pi), r23)),
        lambda: [_away_from(rng.uniform(-6, 6, (2, 3)), [0.0, 2 * np.pi, -2 * np.pi], 0.05)])

    r22 = probe((2, 2))
    run("matmul", lambda ts: T.tsum(T.mul(T.matmul(ts[0], ts[1]), r22)),
        lambda: [rnd(2, 3), rnd(3, 2)])

    r_edge = probe((3, 2))
    run("reshape", lambda ts: T.tsum(T.mul(T.reshape(ts[0], (3, 2)), r_edge)),
        lambda: [rnd(2, 3)])
    run("transpose", lambda ts: T.tsum(T.mul(T.transpose(ts[0]), r_edge)),
        lambda: [rnd(2, 3)])
    r_stack = probe((2, 2, 3))
    run("stack", lambda ts: T.tsum(T.mul(T.stack(ts, axis=0), r_stack)),
        lambda: [rnd(2, 3), rnd(2, 3)])
    r_slice = probe((2, 2))
    run("slice", lambda ts: T.tsum(T.mul(ts[0][:, 1:3], r_slice)),
        lambda: [rnd(2, 3)])
    r_sum = probe((3,))
    run("sum", lambda ts: T.tsum(T.mul(T.tsum(ts[0], axis=0), r_sum)),
        lambda: [rnd(2, 3)])

    rc1 = probe((2, 3, 4, 4))
    run("conv2d_s1", lambda ts: T.tsum(T.mul(T.conv2d(ts[0], ts[1], stride=1, pad=1), rc1)),
        lambda: [rnd(2, 2, 4, 4), rnd(3, 2, 3, 3)])
    rc2 = probe((2, 3, 2, 2))
    run("conv2d_s2", lambda ts: T.tsum(T.mul(T.conv2d(ts[0], ts[1], stride=2, pad=1), rc2)),
        lambda: [rnd(2, 2, 4, 4), rnd(3, 2, 3, 3)])
    rp = probe((2, 2, 2, 2))
    run("max_pool2d", lambda ts: T.tsum(T.mul(T.max_pool2d(ts[0], 2), rp)),
        lambda: [_spread(rng, (2, 2, 4, 4))])
    rg = probe((2, 3))
    run("global_avg_pool", lambda ts: T.tsum(T.mul(T.global_avg_pool(ts[0]), rg)),
        lambda: [rnd(2, 3, 4, 4)])

    labels = rng.integers(0, 3, size=4)
    run("softmax_cross_entropy",
        lambda ts: T.softmax_cross_entropy(ts[0], labels),
        lambda: [rnd(4, 3, lo=-2.0, hi=2.0)])

    return results


def _spread(rng, shape):
    """Values with distinct entries so pooling argmax is FD-stable."""
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64)
    vals += rng.uniform(-0.2, 0.2, size=n)
    return vals.reshape(shape)


def _transform_margin_ok(img, cf, bs, sf, hs, delta, clamp_margin=0.05, edge_margin=0.01):
    """True when a draw stays clear of clamp boundaries and branch edges.

    Clamp boundaries use a 0.05 margin; interpolation-cell and HSV sector
    edges only need to exceed the 1e-5 FD step by a safe factor.
    """
    from . import transforms as TF
    from .tensor import Tensor

    x = img * cf
    if x.min() < clamp_margin or x.max() > 1 - clamp_margin:
        return False
    x = x + bs
    if x.min() < clamp_margin or x.max() > 1 - clamp_margin:
        return False
    r, g, b = x[0], x[1], x[2]
    gaps = np.stack([np.abs(r - g), np.abs(g - b), np.abs(r - b)])
    if gaps.min() < edge_margin:
        return False
    maxc = x.max(axis=0)
    chroma = maxc - x.min(axis=0)
    ss = chroma / maxc * sf
    if ss.max() > 1 - clamp_margin or ss.min() < clamp_margin:
        return False
    hsv = TF.rgb_to_hsv(Tensor(x)).data
    h2 = np.mod(hsv[0] + hs, 2 * np.pi)
    if np.min(h2) < clamp_margin or np.max(h2) > 2 * np.pi - clamp_margin:
        return False
    frac = np.mod(h2 * 3 / np.pi, 1.0)
    if np.min(np.minimum(frac, 1 - frac)) < edge_margin:
        return False
    grid = TF.affine_grid(TF.AffineParams(Tensor(delta)), img.shape[1], img.shape[2]).data
    px = (grid[..., 0] + 1) * img.shape[2] / 2 - 0.5
    py = (grid[..., 1] + 1) * img.shape[1] / 2 - 0.5
    for p in (px, py):
        fr = np.mod(p, 1.0)
        if np.min(np.minimum(fr, 1 - fr)) < edge_margin:
            return False
    return True


def _banded_image(rng, h, w):
    """Random image whose channels stay well separated at every pixel."""
    bands = np.array([0.25, 0.45, 0.65])
    order = rng.permuted(np.tile(np.arange(3), (h * w, 1)), axis=1)
    img = bands[order].T.reshape(3, h, w)
    return img + rng.uniform(-0.04, 0.04, size=(3, h, w))


def _draw_transform_point(rng, img):
    for _ in range(2000):
        cf = rng.uniform(0.8, 1.1)
        bs = rng.uniform(-0.05, 0.08)
        sf = rng.uniform(0.5, 1.1)
        hs = rng.uniform(-2.5, 2.5)
        delta = rng.uniform(-0.15, 0.15, size=(2, 3))
        if _transform_margin_ok(img, cf, bs, sf, hs, delta):
            return cf, bs, sf, hs, delta
    raise RuntimeError("could not draw margin-respecting transform params")


def transform_gradient_suite(points=100, seed=0):
    """FD errors of apply_transform grads w.r.t. params and image."""
    from . import transforms as TF
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(points):
        img = _banded_image(rng, 4, 4)
        cf, bs, sf, hs, delta = _draw_transform_point(rng, img)
        probe = rng.standard_normal((3, 4, 4))

        def build(ts):
            image, cft, bst, sft, hst, dt = ts
            params = TF.TransformParams(
                color=TF.ColorParams(cf=cft, bs=bst, sf=sft, hs=hst),
                affine=TF.AffineParams(delta=dt),
            )
            return T.tsum(T.mul(TF.apply_transform(image, params), Tensor(probe)))

        arrays = [img, np.asarray(cf), np.asarray(bs), np.asarray(sf),
                  np.asarray(hs), delta]
        errs.append(check_gradients(build, arrays))
    return errs


def quadratic_hypergradient_closed_form(omega0, theta, lr_inner):
    """K=1 oracle for L_tr = 0.5*(w - th)^2, L_val = 0.5*w^2.

    One inner step gives w1 = w0 - lr*(w0 - th); d w1/d th = lr;
    hypergradient = w1 * lr.
    """
    w1 = omega0 - lr_inner * (omega0 - theta)
    return w1 * lr_inner, w1


def quadratic_alternating_trajectory(omega0, theta0, lr_inner, lr_outer, steps):
    """Analytic recursion for the alternating K=J=1 scheme on the quadratic."""
    w, th = omega0, theta0
    for _ in range(steps):
        w = w - lr_inner * (w - th)
        th = th - lr_outer * (w * lr_inner)
    return w, th


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def _tiny_learned_instance(seed=0, scenario="color", k=1, j=1, hvp_mode="exact",
                           lr_inner=0.05):
    """Small float64 augmenter+classifier bilevel instance for oracles."""
    from .augmenter import AugmenterNet, NoiseSource
    from .bilevel import BilevelConfig, BilevelEngine
    from .classifier import ClassifierNet
    from .problems import AugmentedClassificationProblem

    rng = np.random.default_rng(seed)
    aug = AugmenterNet(scenario, noise_dim=5, hidden=(5, 4, 3), seed=seed,
                       dtype=np.float64)
    for p in aug.params:
        p.data = rng.standard_normal(p.shape) * 0.2
    net = ClassifierNet(2, image_size=8, channels=(3, 3, 3), seed=seed + 1,
                        dtype=np.float64)
    problem = AugmentedClassificationProblem(aug, net, NoiseSource(seed + 2, dim=5))
    cfg = BilevelConfig(unroll_steps=k, update_period=j, lr_inner=lr_inner,
                        lr_outer=0.1, hvp_mode=hvp_mode, epochs=1, batch_size=4)
    engine = BilevelEngine(problem, cfg)
    imgs = rng.uniform(0.2, 0.8, (16, 3, 8, 8))
    labels = rng.integers(0, 2, 16)
    val = (rng.uniform(0.2, 0.8, (8, 3, 8, 8)), rng.integers(0, 2, 8))
    return engine, problem, (imgs, labels), val


def run_oracle_suites(fast=False):
    """The verification suites behind `cli verify`: FD gradient checks,
    hypergradient closed forms, full-unroll equivalence, HVP cross-check.

    Returns [(name, passed, detail)] for reporting.
    """
    from .bilevel import BilevelConfig, BilevelEngine
    from .problems import QuadraticProblem
    from .tensor import Tape, Tensor

    results = []
    points = 20 if fast else 100

    suite, dt = timed(primitive_gradient_suite, points=points)
    worst = max(suite, key=lambda r: r[1])
    ok = all(err < 1e-5 for _, err in suite)
    results.append((
        "primitive gradients vs finite differences",
        ok, f"{len(suite)} ops x {points} points, worst {worst[0]}={worst[1]:.2e} "
            f"(tol 1e-5), {dt:.1f}s",
    ))

    errs, dt = timed(transform_gradient_suite, points=max(10, points // 5))
    ok = max(errs) < 1e-4
    results.append((
        "transform gradients vs finite differences",
        ok, f"{len(errs)} points, worst {max(errs):.2e} (tol 1e-4), {dt:.1f}s",
    ))

    def quad_suite():
        problem = QuadraticProblem(omega0=0.0, theta0=1.0)
        engine = BilevelEngine(problem, BilevelConfig(
            unroll_steps=1, update_period=1, lr_inner=0.1, lr_outer=2.0,
            epochs=1, batch_size=1))
        engine.step(None)
        grads, _ = engine.hypergradient((None, None))
        engine.abort()
        expected, _ = quadratic_hypergradient_closed_form(0.0, 1.0, 0.1)
        err = abs(grads[0] - expected)
        problem2 = QuadraticProblem(omega0=0.0, theta0=1.0)
        engine2 = BilevelEngine(problem2, BilevelConfig(
            unroll_steps=1, update_period=1, lr_inner=0.1, lr_outer=2.0,
            epochs=1, batch_size=1))
        for _ in range(200):
            engine2.step(None)
            engine2.outer_update((None, None))
        return err, abs(problem2.theta[0].item())

    (err, theta_dist), dt = timed(quad_suite)
    ok = err < 1e-10 and theta_dist < 0.05
    results.append((
        "quadratic hypergradient closed form + convergence",
        ok, f"K=1 error {err:.2e} (tol 1e-10), |theta*| {theta_dist:.3f} "
            f"(tol 0.05), {dt:.1f}s",
    ))

    def full_unroll():
        t_steps = 6
        engine, problem, (imgs, labels), val = _tiny_learned_instance(
            seed=6, k=t_steps, j=t_steps)
        batches = [(imgs[(3 * i) % 12 : (3 * i) % 12 + 4],
                    labels[(3 * i) % 12 : (3 * i) % 12 + 4]) for i in range(t_steps)]
        noises = [problem.prepare_batch(b)[2] for b in batches]
        theta0 = [p.data.copy() for p in problem.augmenter.params]
        omega0 = [p.data.copy() for p in problem.classifier.params]
        for (b, n) in zip(batches, noises):
            if engine.window is None:
                engine._open_window()
            engine._recorded_step((b[0], b[1], n))
            engine.step_count += 1
        windowed, _ = engine.hypergradient(val)
        engine.abort()

        for p, d in zip(problem.augmenter.params, theta0):
            p.data = d.copy()
        with Tape() as tape:
            for p in problem.augmenter.params:
                tape.watch(p)
            omega = [Tensor(d.copy()) for d in omega0]
            for w in omega:
                tape.watch(w)
            for (b, n) in zip(batches, noises):
                loss = problem.train_loss(omega, (b[0], b[1], n))
                grads = T.grad(loss, omega, create_graph=True)
                omega = [T.sub(w, T.mul(g, engine.config.lr_inner))
                         for w, g in zip(omega, grads)]
            vloss = problem.val_loss(omega, val)
            full = T.grad(vloss, problem.augmenter.params)
        w_flat = np.concatenate([g.ravel() for g in windowed])
        f_flat = np.concatenate([g.data.ravel() for g in full])
        return float(np.max(np.abs(w_flat - f_flat)))

    err, dt = timed(full_unroll)
    ok = err < 1e-6
    results.append((
        "truncated K=T equals full-unroll backprop",
        ok, f"max abs diff {err:.2e} (tol 1e-6), {dt:.1f}s",
    ))

    def hvp_cross():
        grads = {}
        for mode in ("exact", "central-diff"):
            engine, problem, (imgs, labels), val = _tiny_learned_instance(
                seed=3, hvp_mode=mode)
            engine.config.eps_hvp = 1e-4
            engine.step((imgs[:4], labels[:4]))
            g, _ = engine.hypergradient(val)
            engine.abort()
            grads[mode] = np.concatenate([x.ravel() for x in g])
        a, b = grads["exact"], grads["central-diff"]
        return float(np.linalg.norm(a - b) / (np.linalg.norm(a) + 1e-12))

    rel, dt = timed(hvp_cross)
    ok = rel < 1e-3
    results.append((
        "exact vs central-difference hypergradient",
        ok, f"relative difference {rel:.2e} (tol 1e-3), {dt:.1f}s",
    ))
    return results
