"""Acceptance gate. Each test prints one ``criterion N: PASS|FAIL`` line.

The desk-scale training runs (default config, 2000 steps) are shared by a
session fixture and cached on disk under a key made from the resolved
config text and the package source, so an edit to either retrains.
"""

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import fsim_direct, ssim_direct
from siammcvae import checkpoint as ckpt
from siammcvae import cli, data, gradcheck, harness
from siammcvae import config as cfgmod
from siammcvae import metrics as mt
from siammcvae import tensor as T
from siammcvae.config import TrainConfig
from siammcvae.loss import kl_loss, kl_minimum, recon_loss, total_loss
from siammcvae.model import forward, init_params, siamvit_encode
from siammcvae.optim import AdamHyper, AdamState, adam_step
from siammcvae.vision import (PatchGrid, compose_output, patchify, sample_mask,
                              scatter_rows, unpatchify)

CACHE = Path.home() / ".cache" / "siammcvae-acceptance"
DESK = TrainConfig()


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def note(n, detail):
    line = f"criterion {n}: REPORTED - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


# ---------------------------------------------------------------- shared desk runs

def _source_digest():
    h = hashlib.sha256()
    root = Path(harness.__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def desk_run(cfg):
    """Train ``cfg`` (or reuse the cached identical run); returns (checkpoint, seconds)."""
    key = hashlib.sha256((cfgmod.dumps(cfg) + _source_digest()).encode()).hexdigest()[:16]
    out = CACHE / key
    meta = out / "meta.json"
    if meta.exists() and (out / "checkpoint.bin").exists():
        return ckpt.load(out / "checkpoint.bin"), json.loads(meta.read_text())["seconds"]
    t0 = time.perf_counter()
    harness.train(cfg, out, evaluate_at_end=False)
    seconds = time.perf_counter() - t0
    meta.write_text(json.dumps({"seconds": seconds}))
    return ckpt.load(out / "checkpoint.bin"), seconds


@pytest.fixture(scope="session")
def desk():
    return desk_run(DESK)


@pytest.fixture(scope="session")
def desk_eval(desk):
    ck, _ = desk
    return harness.evaluate(ck.params, ck.config, harness.heldout_pairs(ck.config), 0.75,
                            ck.config.seed)


# ---------------------------------------------------------------- 1. gradients

def _op_cases(rng):
    r = lambda *s: T.Tensor(rng.uniform(-1, 1, s), requires_grad=True)
    pos = lambda *s: T.Tensor(rng.uniform(0.5, 1.5, s), requires_grad=True)
    W = {}

    def proj(name, y):
        if name not in W:
            W[name] = rng.uniform(-1, 1, y.shape)
        return T.sum(T.hadamard(y, W[name]))

    q, k, v = r(2, 9, 4), r(2, 9, 4), r(2, 9, 4)
    return {
        "add": (lambda a, b: proj("add", a + b), [r(3, 4), r(4)]),
        "sub": (lambda a, b: proj("sub", a - b), [r(3, 4), r(3, 1)]),
        "hadamard": (lambda a, b: proj("had", T.hadamard(a, b)), [r(3, 4), r(3, 4)]),
        "scale": (lambda a: proj("scale", T.scale(a, -2.5)), [r(3, 4)]),
        "exp": (lambda a: proj("exp", T.exp(a)), [r(3, 4)]),
        "log": (lambda a: proj("log", T.log(a)), [pos(3, 4)]),
        "gelu": (lambda a: proj("gelu", T.gelu(a)), [r(3, 4)]),
        "sum_axis": (lambda a: proj("sumax", T.sum(a, axis=0)), [r(3, 4)]),
        "mean": (lambda a: T.mean(T.hadamard(a, a)), [r(3, 4)]),
        "frobenius_sq": (T.frobenius_sq, [r(3, 4)]),
        "matmul": (lambda a, b: proj("mm", T.matmul(a, b)), [r(3, 4), r(4, 5)]),
        "matmul_batched": (lambda a, b: proj("bmm", T.matmul(a, b)), [r(2, 3, 4), r(4, 5)]),
        "transpose": (lambda a: proj("tr", T.transpose(a, (2, 0, 1))), [r(2, 3, 4)]),
        "reshape": (lambda a: proj("rs", T.reshape(a, (6, 2))), [r(3, 4)]),
        "concat_cols": (lambda a, b: proj("cc", T.concat_cols([a, b])), [r(3, 2), r(3, 4)]),
        "concat_rows": (lambda a, b: proj("cr", T.concat_rows([a, b])), [r(2, 4), r(3, 4)]),
        "slice_rows": (lambda a: proj("sl", T.slice_rows(a, 1, 4)), [r(5, 3)]),
        "gather_rows": (lambda a: proj("ga", T.gather_rows(a, np.array([4, 0, 0, 2]))), [r(5, 3)]),
        "gather_rows_batched": (lambda a: proj("gb", T.gather_rows(a, np.array([[1, 0], [2, 2]]))),
                                [r(2, 3, 4)]),
        "scatter_rows": (lambda a: proj("sc", T.scatter_rows(a, [0, 3, 4], 6)), [r(3, 4)]),
        "layernorm": (lambda a, g, b: proj("ln", T.layernorm(a, g, b)), [r(4, 6), r(6), r(6)]),
        "softmax": (lambda a: proj("sm", T.softmax_lastdim(a)), [r(3, 5)]),
        "attention_standard": (lambda a, b, c: proj("as", T.attention(a, b, c, "standard")),
                               [q, k, v]),
        "attention_chunked": (lambda a, b, c: proj("ac", T.attention(a, b, c, "chunked", 4)),
                              [T.Tensor(q.data.copy(), requires_grad=True),
                               T.Tensor(k.data.copy(), requires_grad=True),
                               T.Tensor(v.data.copy(), requires_grad=True)]),
    }


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    per_op = {name: gradcheck.check(fn, xs) for name, (fn, xs) in _op_cases(rng).items()}
    worst_op = max(per_op, key=per_op.get)

    cfg = DESK.model
    grid = cfg.grid
    params = init_params(cfg, 2)
    # larger-than-init weights so every path carries signal
    for p in params.values():
        p.data += rng.normal(0, 0.05, p.shape)
    A1, A2 = rng.random((grid.H, grid.W, grid.C)), rng.random((grid.H, grid.W, grid.C))
    mask = sample_mask(0.75, grid.N, 3)
    noise = rng.standard_normal((grid.N + 1, cfg.D_latent))
    R = patchify(A2, grid)
    names = sorted(params)
    # softmax is shift-invariant per row, so key biases get an exactly-zero
    # gradient; a relative error there only measures finite-difference noise
    shift_invariant = [n for n in names if n.endswith("attn.b_k")]
    checked = [n for n in names if n not in shift_invariant]

    def loss_over(order):
        def loss(*ps):
            pd = {**params, **dict(zip(order, ps))}
            G, M, S = forward(A1, A2, mask, pd, cfg, noise=noise)
            return total_loss(G, R, mask, grid, M, S, beta=0.2).total
        return loss

    e2e = gradcheck.check(loss_over(checked), [params[n] for n in checked], samples=2,
                          rng=np.random.default_rng(4))
    zero_fn = loss_over(shift_invariant)
    zero_in = [params[n] for n in shift_invariant]
    zero_analytic = max(float(np.max(np.abs(g))) for g in gradcheck.analytic_grads(zero_fn, zero_in))
    zero_numeric = max(abs(gradcheck.numeric_grad(zero_fn, zero_in, w, (j,)))
                       for w in range(len(zero_in)) for j in (0, 7))
    secs = time.perf_counter() - t0
    ok = (per_op[worst_op] < 1e-5 and e2e < 1e-3 and zero_analytic < 1e-18
          and zero_numeric < 1e-9 and secs < 120)
    report(1, ok, f"{len(per_op)} ops, worst per-op rel err {per_op[worst_op]:.2e} ({worst_op}); "
                  f"end-to-end desk forward rel err {e2e:.2e} over {len(checked)} tensors; "
                  f"{len(shift_invariant)} key-bias tensors have zero gradient (analytic max "
                  f"{zero_analytic:.1e}, finite difference max {zero_numeric:.1e}); {secs:.1f}s")


# ---------------------------------------------------------------- 2. loss identities

def test_criterion_2_loss_identities():
    shape = (65, 48)
    exact_zero = kl_loss(np.zeros(shape), np.ones(shape)).item() == 0.0
    s_star = np.full(shape, 1 / math.sqrt(2))
    at_min = kl_loss(np.zeros(shape), s_star).item()
    analytic = (math.log(2) - 1) / 4
    rng = np.random.default_rng(2)
    perturbed = []
    for _ in range(1000):
        M = rng.normal(0, 0.2, shape) * rng.integers(0, 2)
        S = np.clip(s_star + rng.normal(0, 0.2, shape), 1e-3, None)
        perturbed.append(kl_loss(M, S).item())
    grid = PatchGrid(16, 16, 3, 4)
    m = sample_mask(0.5, grid.N, 5)
    R = rng.random((grid.N, grid.patch_dim))
    O = rng.random((grid.N + 1, grid.patch_dim))
    vis = m.visible_array()
    base = recon_loss(compose_output(O, R[vis], m), R, m, grid).item()
    Rc = R.copy()
    Rc[vis] = rng.normal(5, 3, (len(vis), grid.patch_dim))
    corrupted = recon_loss(compose_output(O, Rc[vis], m), Rc, m, grid).item()
    ok = (exact_zero and abs(at_min - analytic) < 1e-15 and abs(kl_minimum() - analytic) < 1e-15
          and min(perturbed) >= at_min and corrupted == base)
    report(2, ok, f"kl(0,1)==0: {exact_zero}; kl at 1/sqrt2 = {at_min:.6f} (analytic "
                  f"{analytic:.6f}); min over 1000 perturbations {min(perturbed):.6f}; "
                  f"recon unchanged by visible corruption: {corrupted == base}")


# ---------------------------------------------------------------- 3. index algebra

def test_criterion_3_index_algebra():
    rng = np.random.default_rng(3)
    round_trip = True
    for P, H, W, C in ((8, 64, 64, 3), (4, 16, 24, 1), (2, 6, 10, 2), (1, 3, 5, 3)):
        g = PatchGrid(H, W, C, P)
        img = rng.random((H, W, C))
        round_trip &= np.array_equal(unpatchify(patchify(img, g), g), img)
        rows = rng.random((g.N, g.patch_dim))
        round_trip &= np.array_equal(patchify(unpatchify(rows, g), g), rows)
    disjoint = True
    for _ in range(50):
        N = int(rng.integers(2, 80))
        m = sample_mask(rng.uniform(0.05, 0.95), N, rng)
        x = rng.random((N, 7))
        a = scatter_rows(x[m.visible_array()], m.visible_array(), N).data
        b = scatter_rows(x[m.masked_array()], m.masked_array(), N).data
        disjoint &= np.array_equal(a + b, x) and not np.any((a != 0) & (b != 0))
    visible_exact = True
    for _ in range(50):
        g = PatchGrid(32, 32, 3, 8)
        m = sample_mask(rng.uniform(0.1, 0.9), g.N, rng)
        X2 = patchify(rng.random((32, 32, 3)), g)
        O = rng.normal(size=(g.N + 1, g.patch_dim))
        G = compose_output(O, X2[m.visible_array()], m).data
        visible_exact &= G[m.visible_array()].tobytes() == X2[m.visible_array()].tobytes()
        visible_exact &= np.array_equal(G[m.masked_array()], O[m.masked_array() + 1])
    report(3, round_trip and disjoint and visible_exact,
           f"round-trip bit-exact: {round_trip}; scatter disjoint support: {disjoint}; "
           f"compose keeps visible rows bit-identical: {visible_exact}")


# ---------------------------------------------------------------- 4. kernels

def test_criterion_4_kernel_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, worst_grad, largest = 0.0, 0.0, 0
    for i in range(100):
        n = 256 if i == 0 else int(rng.integers(1, 257))
        largest = max(largest, n)
        h, d = int(rng.integers(1, 5)), int(rng.integers(1, 33))
        chunk = int(rng.choice([1, 7, 16, 64, 100]))
        q, k, v = (rng.standard_normal((h, n, d)) for _ in range(3))
        a = T.attention(q, k, v, "standard").data
        b = T.attention(q, k, v, "chunked", chunk).data
        worst = max(worst, float(np.max(np.abs(a - b))))
        if i % 10 == 0:
            g = rng.standard_normal(a.shape)
            grads = []
            for kern in ("standard", "chunked"):
                ts = [T.Tensor(x.copy(), requires_grad=True) for x in (q, k, v)]
                with T.Tape():
                    out = T.sum(T.hadamard(T.attention(*ts, kern, chunk), g))
                T.backward(out)
                grads.append([t.grad for t in ts])
            worst_grad = max(worst_grad, max(float(np.max(np.abs(x - y)))
                                             for x, y in zip(*grads)))
    secs = time.perf_counter() - t0
    report(4, worst < 1e-10 and secs < 60,
           f"100 instances up to n={largest}: max |standard - chunked| = {worst:.2e} "
           f"(gradients {worst_grad:.2e}); {secs:.1f}s")


# ---------------------------------------------------------------- 5. siamese property

def test_criterion_5_siamese_property():
    cfg = DESK.model
    g = cfg.grid
    rng = np.random.default_rng(5)
    params = init_params(cfg, 5)
    X = patchify(rng.random((g.H, g.W, g.C)), g)
    everything = np.arange(g.N)
    u1 = siamvit_encode(X, everything, params, cfg).data
    u2 = siamvit_encode(X.copy(), everything.copy(), params, cfg).data
    identical = u1.tobytes() == u2.tobytes()

    # the shared weights receive the sum of both branches' gradient contributions
    A1, A2 = rng.random((2, g.H, g.W, g.C))
    mask = sample_mask(0.75, g.N, 6)
    probe = rng.standard_normal(u1.shape)
    vis = mask.visible_array()

    def branch_grads(use1, use2):
        for p in params.values():
            p.grad = None
        with T.Tape():
            total = 0.0
            if use1:
                total = total + T.sum(T.hadamard(siamvit_encode(patchify(A1, g), everything,
                                                                params, cfg), probe))
            if use2:
                U2 = siamvit_encode(patchify(A2, g, vis), vis, params, cfg)
                total = total + T.sum(T.hadamard(U2, probe[np.r_[0, vis + 1]]))
        T.backward(total)
        return {k: p.grad.copy() for k, p in params.items() if p.grad is not None}

    both, only1, only2 = branch_grads(1, 1), branch_grads(1, 0), branch_grads(0, 1)
    summed = all(np.allclose(both[k], only1.get(k, 0) + only2.get(k, 0), rtol=1e-12, atol=1e-15)
                 for k in both)
    adam_step(params, {k: both.get(k) for k in params}, AdamState(), AdamHyper())
    v1 = siamvit_encode(X, everything, params, cfg).data
    v2 = siamvit_encode(X.copy(), everything, params, cfg).data
    consistent = v1.tobytes() == v2.tobytes() and not np.array_equal(v1, u1)
    report(5, identical and summed and consistent,
           f"identical inputs give bit-identical encodings: {identical}; shared-weight gradient "
           f"= sum of branch gradients: {summed}; after one step both uses still agree "
           f"and moved: {consistent}")


# ---------------------------------------------------------------- 6. metrics oracle

def test_criterion_6_metrics_oracle():
    rng = np.random.default_rng(6)
    ssim_err = fsim_err = 0.0
    for _ in range(20):
        a = rng.uniform(0, 255, (32, 32, 3))
        if rng.random() < 0.5:
            b = np.clip(a + rng.normal(0, rng.uniform(2, 40), a.shape), 0, 255)
        else:
            b = rng.uniform(0, 255, (32, 32, 3))
        ssim_err = max(ssim_err, abs(mt.ssim(a, b) - ssim_direct(a, b)))
        fsim_err = max(fsim_err, abs(mt.fsim(a, b) - fsim_direct(a, b)))
    zero_db = mt.psnr_from_mse(65025.0) == 0.0
    a = rng.uniform(0, 255, (32, 32, 3))
    ident = mt.evaluate_images(a, a)
    identity = (ident.mse == 0.0 and ident.mae == 0.0 and ident.psnr == mt.PSNR_CAP
                and ident.ssim == 1.0 and ident.fsim == 1.0)
    report(6, ssim_err < 1e-10 and fsim_err < 1e-6 and zero_db and identity,
           f"20 images: max SSIM err {ssim_err:.2e}, max FSIM err {fsim_err:.2e}; "
           f"psnr(65025) = 0 dB: {zero_db}; identity exact: {identity} "
           f"(ssim {ident.ssim!r}, fsim {ident.fsim!r})")


# ---------------------------------------------------------------- 7. desk learning

def test_criterion_7_desk_scale_learning(desk, desk_eval):
    _, seconds = desk
    s = desk_eval.summary()
    model, meanfill, copy = (s[k]["masked_mse"] for k in ("model", "meanfill", "copy"))
    ok = model < 0.6 * meanfill and model < copy and seconds <= 900
    report(7, ok, f"masked-region MSE at 75%: model {model:.1f}, mean-fill {meanfill:.1f} "
                  f"(ratio {model / meanfill:.3f}, need < 0.6), copy-from-A1 {copy:.1f} "
                  f"(ratio {model / copy:.3f}, need < 1); {DESK.steps} steps in {seconds:.0f}s")


# ---------------------------------------------------------------- 8. trends

def test_criterion_8_mask_ratio_trend(desk):
    ck, _ = desk
    rows = harness.sweep("mask_ratio", DESK, checkpoint=ck)
    mse = [r["mse"] for r in rows]
    masked = [r["masked_mse"] for r in rows]
    beats = all(r["masked_mse"] < r["meanfill_masked_mse"] for r in rows)
    strictly = all(a < b for a, b in zip(mse, mse[1:]))
    table = ", ".join(f"{r['value']:.2f}: {r['mse']:.1f}/{r['masked_mse']:.1f}" for r in rows)
    report(8, strictly, f"evaluated MSE strictly increasing over 0.45..0.90 "
                        f"(ratio: full/masked-region) {table}")
    note(8, f"masked-region MSE non-decreasing: {all(a <= b for a, b in zip(masked, masked[1:]))}; "
            f"beats mean-fill at every ratio: {beats}")


def test_criterion_8_reparameterization_direction(desk, desk_eval):
    off, _ = desk_run(DESK.with_(reparam_enabled=False))
    ev_off = harness.evaluate(off.params, off.config, harness.heldout_pairs(off.config), 0.75,
                              off.config.seed)
    on_s, off_s = desk_eval.summary()["model"], ev_off.summary()["model"]
    cols = ("masked_mse",) + harness.METRIC_COLUMNS
    table = " | ".join(f"{c}: x {off_s[c]:.4g} / ok {on_s[c]:.4g}" for c in cols)
    note(8, f"reparameterization (x = disabled, ok = enabled), same seeds: {table}; "
            f"enabled <= disabled on masked MSE: {on_s['masked_mse'] <= off_s['masked_mse']}")


# ---------------------------------------------------------------- 9. determinism

def test_criterion_9_determinism_and_checkpointing(tmp_path):
    cfg = DESK.with_(steps=3, train_pairs=32, eval_pairs=4)
    run_a = harness.train(cfg, tmp_path / "a", evaluate_at_end=False)
    harness.train(cfg, tmp_path / "b", evaluate_at_end=False)
    same_csv = (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()

    part = harness.train(cfg.with_(steps=2), evaluate_at_end=False)
    path = ckpt.save(part.checkpoint, tmp_path / "mid.bin")
    loaded = ckpt.load(path)
    resaved = ckpt.dumps(loaded) == path.read_bytes()
    resumed = harness.train(cfg, resume=loaded, evaluate_at_end=False)
    straight = run_a.checkpoint
    same_step = resumed.losses == run_a.losses[2:]
    same_params = all(np.array_equal(straight.params[k].data, resumed.checkpoint.params[k].data)
                      for k in straight.params)
    same_moments = all(np.array_equal(straight.adam.m[k], resumed.checkpoint.adam.m[k])
                       and np.array_equal(straight.adam.v[k], resumed.checkpoint.adam.v[k])
                       for k in straight.params)
    ok = same_csv and resaved and same_step and same_params and same_moments
    report(9, ok, f"identical loss CSVs: {same_csv}; load/save bit-identical: {resaved}; "
                  f"resumed step equals uninterrupted (loss row, params, moments): "
                  f"{same_step}, {same_params}, {same_moments}")


# ---------------------------------------------------------------- 10. reports

def test_criterion_10_beta_sweep_and_panels(desk, tmp_path):
    ck, _ = desk
    # the report shape is under test here, so each beta setting trains briefly
    out = tmp_path / "beta"
    rc = cli.main(["sweep", "--kind", "beta", "--steps", "5", "--eval-pairs", "16",
                   "--out", str(out)])
    lines = (out / "sweep_beta.csv").read_text().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
    betas = [float(r["value"]) for r in rows]
    shaped = (rc == 0 and betas == [0.1, 0.2, 0.25, 0.5, 1.0]
              and all(np.isfinite(float(r[m])) for r in rows for m in harness.METRIC_COLUMNS))

    ck_path = ckpt.save(ck, tmp_path / "desk.bin")
    panel_path = tmp_path / "panel.ppm"
    rc2 = cli.main(["restore", "--checkpoint", str(ck_path), "--index", "0",
                    "--mask-ratio", "0.9", "--out", str(panel_path)])
    panel = data.read_image(panel_path)
    g = ck.config.model.grid
    pair = harness.heldout_pairs(ck.config)[0]
    masked, restored, truth = np.split(panel, 3, axis=1)
    m = harness.eval_mask(0, pair.id, 0.9, g.N)
    pm = harness.pixel_mask(m, g)
    layout = (rc2 == 0 and panel.shape == (g.H, 3 * g.W, 3) and np.array_equal(truth, pair.A2)
              and np.array_equal(restored[~pm], pair.A2[~pm]) and np.all(masked[pm] == 128)
              and len(m) == round(0.9 * g.N))
    report(10, shaped and layout,
           f"beta sweep CSV {len(rows)} rows x {len(harness.METRIC_COLUMNS)} metrics "
           f"(betas {betas}); restore panel at 90% masking {panel.shape[1]}x{panel.shape[0]} "
           f"masked | model | ground truth with {len(m)}/{g.N} patches hidden: {layout}")
