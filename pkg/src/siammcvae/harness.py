"""Training loop, evaluation with baselines, restoration panels and sweeps."""

import csv
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import data
from . import metrics as mt
from . import tensor as T
from .loss import total_loss
from .model import forward, init_params
from .optim import AdamState, adam_step
from .vision import MaskSet, patchify, sample_block_mask, sample_mask, unpatchify

log = logging.getLogger("siammcvae.harness")

LOSS_COLUMNS = ("step", "total", "recon", "kl", "beta")
METRIC_COLUMNS = ("mse", "mae", "psnr", "ssim", "fsim")
BASELINES = ("meanfill", "copy")

SWEEPS = {
    "mask_ratio": (0.45, 0.60, 0.75, 0.90),
    "frame_gap": (2, 4, 8, 12),
    "beta": (0.1, 0.2, 0.25, 0.5, 1.0),
    "reparam": (False, True),
    "kernel": ("standard", "chunked", "adaptive"),
}


class TrainingAborted(RuntimeError):
    def __init__(self, step, reason):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


# ---------------------------------------------------------------- seeding / data

def _streams(seed):
    """Independent seeds for init, the training stream, train data and eval data."""
    kids = np.random.SeedSequence(seed).spawn(4)
    return kids[0], kids[1], int(kids[2].generate_state(1)[0]), int(kids[3].generate_state(1)[0])


def training_pairs(cfg):
    if cfg.data_dir:
        return data.load_dataset(cfg.data_dir, gap=cfg.frame_gap)
    return data.synthetic_dataset(cfg.train_pairs, cfg.frame_gap, _streams(cfg.seed)[2],
                                  length=cfg.sequence_length, H=cfg.model.grid.H,
                                  W=cfg.model.grid.W, background=cfg.background,
                                  mask_later=cfg.mask_later)


def heldout_pairs(cfg, gap=None, n=None):
    """Held-out synthetic pairs; scenes are fixed by the seed, whatever the gap."""
    return data.synthetic_dataset(n or cfg.eval_pairs, cfg.frame_gap if gap is None else gap,
                                  _streams(cfg.seed)[3], length=cfg.sequence_length,
                                  H=cfg.model.grid.H, W=cfg.model.grid.W,
                                  background=cfg.background, mask_later=cfg.mask_later)


def draw_mask(ratio, N, rng, mode="random"):
    return (sample_block_mask if mode == "block" else sample_mask)(ratio, N, rng)


def eval_mask(seed, image_id, ratio, N, mode="random"):
    """Mask fixed by (seed, image id) so every method sees the same holes."""
    h = zlib.crc32(f"{seed}:{image_id}".encode())
    return draw_mask(ratio, N, np.random.default_rng([seed, h]), mode)


def _check_geometry(pairs, grid):
    for p in pairs:
        if p.A1.shape != (grid.H, grid.W, grid.C):
            raise ValueError(f"pair {p.id}: frames {p.A1.shape} do not match model geometry "
                             f"{(grid.H, grid.W, grid.C)}")


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: ckpt.Checkpoint
    losses: list = field(default_factory=list)
    out_dir: Path = None
    summary: dict = None


def _write_loss_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in LOSS_COLUMNS[1:]])


def train_step(params, adam, cfg, A1, A2, rng):
    """One optimizer step on a sampled batch; returns the LossReport."""
    grid = cfg.model.grid
    idx = rng.integers(0, len(A1), size=cfg.batch_size)
    masks = [draw_mask(cfg.mask_ratio, grid.N, rng, cfg.mask_mode) for _ in idx]
    with T.Tape():
        G, M, S = forward(A1[idx], A2[idx], masks, params, cfg.model, rng=rng)
        R = np.stack([patchify(a, grid) for a in A2[idx]])
        rep = total_loss(G, R, masks, grid, M, S, beta=cfg.beta, kl_form=cfg.kl_form)
    T.backward(rep.total)
    adam_step(params, {k: p.grad for k, p in params.items()}, adam, cfg.adam)
    return rep


def train(cfg, out_dir=None, resume=None, pairs=None, evaluate_at_end=True, on_step=None):
    """Run ``cfg.steps`` optimizer steps (continuing ``resume`` if given).

    Writes ``config.txt``, ``loss.csv``, periodic ``checkpoint.bin`` and
    a final evaluation summary when ``out_dir`` is set.
    """
    grid = cfg.model.grid
    pairs = training_pairs(cfg) if pairs is None else pairs
    _check_geometry(pairs, grid)
    A1 = np.stack([p.A1 for p in pairs]).astype(np.float64) / 255.0
    A2 = np.stack([p.A2 for p in pairs]).astype(np.float64) / 255.0

    init_seed, stream_seed, _, _ = _streams(cfg.seed)
    rng = np.random.default_rng(stream_seed)
    if resume is None:
        params = init_params(cfg.model, np.random.default_rng(init_seed))
        adam, start = AdamState(), 0
    else:
        params, adam, start = resume.params, resume.adam, resume.step
        rng.bit_generator.state = resume.rng_state

    out = Path(out_dir) if out_dir else None
    losses = []
    if out:
        out.mkdir(parents=True, exist_ok=True)
        cfgmod.save(cfg, out / "config.txt")

    def snapshot(step):
        return ckpt.Checkpoint(config=cfg, params=params, adam=adam, step=step,
                               rng_state=rng.bit_generator.state)

    for step in range(start, cfg.steps):
        try:
            rep = train_step(params, adam, cfg, A1, A2, rng)
        except T.NonFiniteError as e:
            raise TrainingAborted(step, str(e)) from e
        row = {"step": step, **rep.as_floats()}
        if not all(np.isfinite(v) for v in row.values()):
            raise TrainingAborted(step, f"non-finite loss {row}")
        losses.append(row)
        if on_step:
            on_step(row)
        if step % cfg.log_every == 0:
            log.info("step %d total %.5f recon %.5f kl %.5f", step, row["total"],
                     row["recon"], row["kl"])
        if out and (step + 1) % cfg.checkpoint_every == 0:
            ckpt.save(snapshot(step + 1), out / "checkpoint.bin")

    result = TrainResult(checkpoint=snapshot(cfg.steps), losses=losses, out_dir=out)
    if out:
        _write_loss_csv(out / "loss.csv", losses)
        ckpt.save(result.checkpoint, out / "checkpoint.bin")
    if evaluate_at_end:
        ev = evaluate(params, cfg, heldout_pairs(cfg), cfg.mask_ratio, cfg.seed)
        result.summary = ev.summary()
        if out:
            ev.write(out / "eval")
    return result


# ---------------------------------------------------------------- inference

def pixel_mask(mask, grid):
    """(H, W) boolean map of the pixels covered by masked patches."""
    rows = np.zeros((grid.N, grid.patch_dim))
    rows[mask.masked_array()] = 1.0
    return unpatchify(rows, grid)[:, :, 0] > 0.5


def restore_batch(params, model_cfg, A1, A2, masks):
    """Deterministic restorations on the 0..255 scale; visible pixels are A2's own."""
    grid = model_cfg.grid
    G, _, _ = forward(np.asarray(A1) / 255.0, np.asarray(A2) / 255.0, list(masks), params,
                      model_cfg)
    out = []
    for g, a2, m in zip(G.data, A2, masks):
        pred = np.clip(unpatchify(g, grid), 0.0, 1.0) * 255.0
        pm = pixel_mask(m, grid)[:, :, None]
        out.append(np.where(pm, pred, np.asarray(a2, dtype=np.float64)))
    return out


def meanfill_restore(A2, mask, grid, color):
    pm = pixel_mask(mask, grid)[:, :, None]
    return np.where(pm, np.broadcast_to(color, A2.shape), A2.astype(np.float64))


def copy_restore(A1, A2, mask, grid):
    pm = pixel_mask(mask, grid)[:, :, None]
    return np.where(pm, A1, A2).astype(np.float64)


def dataset_mean_color(pairs):
    """Per-channel mean over the intact (A1) frames."""
    frames = np.stack([p.A1 for p in pairs]).astype(np.float64)
    return frames.reshape(-1, frames.shape[-1]).mean(0)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    ids: list
    reports: dict      # method -> list[MetricReport]
    masked_mse: dict   # method -> list[float]
    visible_mse: list  # model only

    def aggregate(self, method="model"):
        return mt.aggregate(self.reports[method])

    def summary(self):
        out = {}
        for m in self.reports:
            agg = self.aggregate(m).as_dict()
            agg["masked_mse"] = float(np.mean(self.masked_mse[m]))
            out[m] = agg
        return out

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for m, reps in self.reports.items():
            with open(out_dir / f"report_{m}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("image_id",) + METRIC_COLUMNS)
                for i, r in zip(self.ids, reps):
                    w.writerow([i] + [repr(float(getattr(r, k))) for k in METRIC_COLUMNS])
        (out_dir / "metric_constants.txt").write_text(
            "".join(f"{k} = {v}\n" for k, v in mt.constants().items()) + f"LUMA = {mt.LUMA.tolist()}\n")
        with open(out_dir / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("method",) + METRIC_COLUMNS + ("masked_mse",))
            for m, agg in self.summary().items():
                w.writerow([m] + [repr(agg[k]) for k in METRIC_COLUMNS + ("masked_mse",)])


def evaluate(params, cfg, pairs, mask_ratio, seed, masked_only=False, batch=16,
             baselines=True):
    """Score the model (and the two baselines) with masks fixed per image id.

    With ``masked_only`` MSE, MAE and PSNR are taken over masked pixels;
    SSIM and FSIM are whole-frame either way.
    """
    grid = cfg.model.grid
    _check_geometry(pairs, grid)
    masks = [eval_mask(seed, p.id, mask_ratio, grid.N, cfg.mask_mode) for p in pairs]
    methods = ("model",) + (BASELINES if baselines else ())
    reports = {m: [] for m in methods}
    masked = {m: [] for m in methods}
    visible = []
    color = dataset_mean_color(pairs)

    restored = []
    for s in range(0, len(pairs), batch):
        chunk, mchunk = pairs[s:s + batch], masks[s:s + batch]
        restored += restore_batch(params, cfg.model, np.stack([p.A1 for p in chunk]),
                                  np.stack([p.A2 for p in chunk]), mchunk)

    for p, m, out in zip(pairs, masks, restored):
        where = np.broadcast_to(pixel_mask(m, grid)[:, :, None], p.A2.shape)
        cands = {"model": out}
        if baselines:
            cands["meanfill"] = meanfill_restore(p.A2, m, grid, color)
            cands["copy"] = copy_restore(p.A1, p.A2, m, grid)
        ref = p.A2.astype(np.float64)
        for name, img in cands.items():
            reports[name].append(mt.evaluate_images(img, ref, where=where if masked_only else None))
            masked[name].append(mt.mse(img, ref, where=where))
        visible.append(mt.mse(out, ref, where=~where))
    return EvalResult(ids=[p.id for p in pairs], reports=reports, masked_mse=masked,
                      visible_mse=visible)


# ---------------------------------------------------------------- restore panels

def masked_view(A2, mask, grid, fill=128):
    pm = pixel_mask(mask, grid)[:, :, None]
    return np.where(pm, np.uint8(fill), A2).astype(np.uint8)


def restore(params, cfg, pair, mask=None, mask_ratio=None, seed=0):
    """Returns (restored uint8 image, panel: masked | model | ground truth)."""
    grid = cfg.model.grid
    _check_geometry([pair], grid)
    if mask is None:
        if mask_ratio is None:
            raise ValueError("need a mask or a mask ratio")
        mask = eval_mask(seed, pair.id, mask_ratio, grid.N, cfg.mask_mode)
    elif not isinstance(mask, MaskSet):
        mask = MaskSet(tuple(sorted(int(i) for i in mask)), grid.N)
    out = restore_batch(params, cfg.model, pair.A1[None], pair.A2[None], [mask])[0]
    img = np.rint(out).astype(np.uint8)
    panel = np.concatenate([masked_view(pair.A2, mask, grid), img, pair.A2.astype(np.uint8)],
                           axis=1)
    return img, panel


# ---------------------------------------------------------------- sweeps

SWEEP_COLUMNS = ("kind", "value") + METRIC_COLUMNS + (
    "masked_mse", "meanfill_masked_mse", "copy_masked_mse")


def _row(kind, value, ev):
    s = ev.summary()
    row = {"kind": kind, "value": value, **{k: s["model"][k] for k in METRIC_COLUMNS}}
    row["masked_mse"] = s["model"]["masked_mse"]
    row["meanfill_masked_mse"] = s["meanfill"]["masked_mse"]
    row["copy_masked_mse"] = s["copy"]["masked_mse"]
    return row


def sweep(kind, cfg, out_dir=None, checkpoint=None, values=None):
    """One row per setting, all with the same seeds.

    mask_ratio and frame_gap evaluate one model (``checkpoint``, under its
    own config, or a fresh run of ``cfg``); beta, reparam and kernel train
    one model per setting.
    """
    if kind not in SWEEPS:
        raise ValueError(f"unknown sweep kind {kind!r}; expected one of {sorted(SWEEPS)}")
    values = SWEEPS[kind] if values is None else tuple(values)
    out = Path(out_dir) if out_dir else None
    rows = []
    if kind in ("mask_ratio", "frame_gap"):
        if checkpoint is None:
            checkpoint = train(cfg, out / "model" if out else None, evaluate_at_end=False).checkpoint
        mcfg = checkpoint.config
        for v in values:
            if kind == "mask_ratio":
                ev = evaluate(checkpoint.params, mcfg, heldout_pairs(mcfg), v, mcfg.seed)
            else:
                ev = evaluate(checkpoint.params, mcfg, heldout_pairs(mcfg, gap=int(v)),
                              mcfg.mask_ratio, mcfg.seed)
            rows.append(_row(kind, v, ev))
    else:
        field_name = {"beta": "beta", "reparam": "reparam_enabled", "kernel": "attention_kernel"}[kind]
        for v in values:
            run_cfg = cfg.with_(**{field_name: v})
            sub = out / f"{kind}_{v}" if out else None
            res = train(run_cfg, sub, evaluate_at_end=False)
            ev = evaluate(res.checkpoint.params, run_cfg, heldout_pairs(run_cfg),
                          run_cfg.mask_ratio, run_cfg.seed)
            rows.append(_row(kind, v, ev))
    if out:
        out.mkdir(parents=True, exist_ok=True)
        cfgmod.save(cfg, out / "config.txt")
        write_sweep(rows, out / f"sweep_{kind}.csv")
    return rows


def write_sweep(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in SWEEP_COLUMNS})
    # plot-ready: one series per metric against the swept value
    series = {k: [r[k] for r in rows] for k in SWEEP_COLUMNS[2:]}
    Path(path).with_suffix(".json").write_text(
        json.dumps({"kind": rows[0]["kind"] if rows else None,
                    "x": [r["value"] for r in rows], "series": series}, indent=1))
