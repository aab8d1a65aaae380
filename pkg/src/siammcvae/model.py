"""Siamese masked conditional VAE for frame restoration.

Parameters live in one flat ``dict`` of named :class:`~siammcvae.tensor.Tensor`
leaves (``enc.*``, ``rep.*``, ``dec.*``). Both siamese branches read the same
``enc.*`` tensors, so weight sharing is structural rather than copied.

Weight matrices keep the (out, in) orientation; per-position biases are
stored as (width, positions) and read column-wise by sequence position.
Sequence row 0 is the class token; patch j sits at row j + 1.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .vision import MaskSet, PatchGrid, compose_output, patchify

log = logging.getLogger(__name__)

KERNELS = ("standard", "chunked", "adaptive")


@dataclass(frozen=True)
class ModelConfig:
    grid: PatchGrid = field(default_factory=lambda: PatchGrid(64, 64, 3, 8))
    D: int = 96
    D_latent: int = 48
    L: int = 4
    L_dec: int = 2
    heads_enc: int = 4
    heads_dec: int = 4
    attention_kernel: str = "adaptive"
    reparam_enabled: bool = True
    chunk_size: int = 64
    adaptive_threshold: int = 128
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.D % self.heads_enc:
            raise ValueError(f"heads_enc={self.heads_enc} must divide D={self.D}")
        if self.D_latent % self.heads_dec:
            raise ValueError(f"heads_dec={self.heads_dec} must divide D'={self.D_latent}")
        if self.L < 1 or self.L_dec < 1:
            raise ValueError("encoder and decoder depth must be >= 1")
        if self.attention_kernel not in KERNELS:
            raise ValueError(f"attention_kernel must be one of {KERNELS}")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")

    def with_(self, **kw):
        return replace(self, **kw)


# ---------------------------------------------------------------- parameters

def param_shapes(cfg):
    """Ordered name -> shape table for every learnable tensor."""
    g = cfg.grid
    N, pd, D, Dl = g.N, g.patch_dim, cfg.D, cfg.D_latent
    s = {
        "enc.c": (D,),
        "enc.W_e": (D, pd),
        "enc.B_e": (D, N),
        "enc.P_e": (N + 1, D),
    }
    s.update(_block_shapes("enc", cfg.L, D, cfg.mlp_ratio))
    s.update({
        "enc.ln_f.gain": (D,),
        "enc.ln_f.bias": (D,),
        "enc.W_u": (Dl, D),
        "enc.B_u": (Dl, N + 1),
        "enc.t": (Dl,),
        "rep.W_m": (Dl, 2 * Dl),
        "rep.B_m": (Dl, N + 1),
        "rep.W_s": (Dl, 2 * Dl),
        "rep.B_s": (Dl, N + 1),
        "dec.W_d": (Dl, 2 * Dl),
        "dec.B_d": (Dl, N + 1),
        "dec.P_d": (N + 1, Dl),
    })
    s.update(_block_shapes("dec", cfg.L_dec, Dl, cfg.mlp_ratio))
    s.update({
        "dec.ln_f.gain": (Dl,),
        "dec.ln_f.bias": (Dl,),
        "dec.W_o": (Dl, pd),
        "dec.B_o": (pd, N + 1),
    })
    return s


def _block_shapes(prefix, depth, d, ratio):
    s = {}
    for l in range(depth):
        p = f"{prefix}.blocks.{l}"
        s.update({
            f"{p}.ln1.gain": (d,), f"{p}.ln1.bias": (d,),
            f"{p}.attn.W_q": (d, d), f"{p}.attn.b_q": (d,),
            f"{p}.attn.W_k": (d, d), f"{p}.attn.b_k": (d,),
            f"{p}.attn.W_v": (d, d), f"{p}.attn.b_v": (d,),
            f"{p}.attn.W_o": (d, d), f"{p}.attn.b_o": (d,),
            f"{p}.ln2.gain": (d,), f"{p}.ln2.bias": (d,),
            f"{p}.mlp.W_1": (ratio * d, d), f"{p}.mlp.b_1": (ratio * d,),
            f"{p}.mlp.W_2": (d, ratio * d), f"{p}.mlp.b_2": (d,),
        })
    return s


def _is_bias(name):
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith(("B_", "b_")) or leaf == "bias"


def init_params(cfg, rng):
    """Small-normal weights and embeddings, zero biases, unit norm gains."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif _is_bias(name):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        params[name] = T.Tensor(data, requires_grad=True, name=name)
    return params


def check_params(params, cfg):
    expected = param_shapes(cfg)
    missing = expected.keys() - params.keys()
    extra = params.keys() - expected.keys()
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape} != {shape}")


# ---------------------------------------------------------------- blocks

def select_kernel(n, cfg):
    """Resolve ``adaptive`` by sequence length; other kernels pass through."""
    if cfg.attention_kernel != "adaptive":
        return cfg.attention_kernel
    choice = "standard" if n <= cfg.adaptive_threshold else "chunked"
    log.debug("adaptive attention: n=%d -> %s", n, choice)
    return choice


def attention(q, k, v, kernel="standard", chunk_size=64):
    """Scaled dot-product attention over (heads, n, d_h) operands."""
    return T.attention(q, k, v, kernel=kernel, chunk_size=chunk_size)


def _linear(x, W, b=None):
    y = x @ T.transpose(W)
    return y if b is None else y + b


def _msa(h, params, p, heads, cfg):
    lead, n, d = h.shape[:-2], h.shape[-2], h.shape[-1]
    dh = d // heads
    split = lead + (n, heads, dh)
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)

    def proj(w):
        y = _linear(h, params[f"{p}.attn.W_{w}"], params[f"{p}.attn.b_{w}"])
        return T.transpose(T.reshape(y, split), perm)

    o = attention(proj("q"), proj("k"), proj("v"), kernel=select_kernel(n, cfg),
                  chunk_size=cfg.chunk_size)
    o = T.reshape(T.transpose(o, perm), lead + (n, d))
    return _linear(o, params[f"{p}.attn.W_o"], params[f"{p}.attn.b_o"])


def _blocks(y, params, prefix, depth, heads, cfg):
    for l in range(depth):
        p = f"{prefix}.blocks.{l}"
        h = T.layernorm(y, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        y = y + _msa(h, params, p, heads, cfg)
        h = T.layernorm(y, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
        h = T.gelu(_linear(h, params[f"{p}.mlp.W_1"], params[f"{p}.mlp.b_1"]))
        y = y + _linear(h, params[f"{p}.mlp.W_2"], params[f"{p}.mlp.b_2"])
    return y


def _with_cls_positions(keep):
    """Sequence rows [0, keep + 1] for each item."""
    keep = np.asarray(keep, dtype=np.intp)
    zero = np.zeros(keep.shape[:-1] + (1,), dtype=np.intp)
    return np.concatenate([zero, keep + 1], axis=-1)


# ---------------------------------------------------------------- stages

def siamvit_encode(patches, keep, params, cfg):
    """Shared-weight ViT encoder applied to the patches listed in ``keep``.

    ``patches`` is (m, P^2 C) or (B, m, P^2 C) with ``keep`` of matching
    leading shape. Embedding biases and positional rows follow the original
    patch indices, so a visible-only sequence keeps its spatial identity.
    Returns (..., m + 1, D') with the class token in row 0.
    """
    X = T.as_tensor(patches)
    keep = np.asarray(keep, dtype=np.intp)
    if keep.ndim == 1 and X.ndim == 3:
        keep = np.broadcast_to(keep, X.shape[:1] + keep.shape)
    if keep.shape != X.shape[:-1]:
        raise ValueError(f"keep shape {keep.shape} does not match patches {X.shape}")
    if keep.shape[-1] > 1 and (np.diff(keep, axis=-1) <= 0).any():
        raise ValueError("keep indices must be strictly ascending")
    if keep.size and (keep.min() < 0 or keep.max() >= cfg.grid.N):
        raise IndexError(f"keep index out of range [0, {cfg.grid.N})")
    D = cfg.D
    lead = X.shape[:-2]
    pos = _with_cls_positions(keep)

    emb = _linear(X, params["enc.W_e"]) + T.gather_rows(T.transpose(params["enc.B_e"]), keep)
    cls = T.reshape(params["enc.c"], (1, D))
    if lead:
        cls = T.Tensor(np.zeros(lead + (1, D))) + cls
    y = T.concat_rows([cls, emb]) + T.gather_rows(params["enc.P_e"], pos)
    y = _blocks(y, params, "enc", cfg.L, cfg.heads_enc, cfg)
    y = T.layernorm(y, params["enc.ln_f.gain"], params["enc.ln_f.bias"])
    return _linear(y, params["enc.W_u"]) + T.gather_rows(T.transpose(params["enc.B_u"]), pos)


def _as_masks(mask):
    return [mask] if isinstance(mask, MaskSet) else list(mask)


def assemble_latent_input(U1, U2, mask, t):
    """[U1, V] where V holds branch-2 encodings at visible rows and ``t`` at masked rows."""
    masks = _as_masks(mask)
    U1, U2, t = T.as_tensor(U1), T.as_tensor(U2), T.as_tensor(t)
    N = masks[0].N
    batched = U1.ndim == 3
    vis = np.stack([m.visible_array() for m in masks])
    hid = np.stack([m.masked_array() for m in masks])
    if not batched:
        vis, hid = vis[0], hid[0]
    if U1.shape[-2] != N + 1 or U2.shape[-2] != vis.shape[-1] + 1:
        raise ValueError(f"latent rows: U1 {U1.shape}, U2 {U2.shape} for N={N}, "
                         f"{vis.shape[-1]} visible")
    if U1.shape[-1] != U2.shape[-1] or t.shape != (U1.shape[-1],):
        raise ValueError("latent widths disagree")
    V = T.scatter_rows(U2, _with_cls_positions(vis), N + 1)
    if hid.shape[-1]:
        tokens = T.Tensor(np.zeros(U1.shape[:-2] + (hid.shape[-1], U1.shape[-1]))) + t
        V = V + T.scatter_rows(tokens, hid + 1, N + 1)
    return T.concat_cols([U1, V])


def reparameterize(U, params, noise, enabled=True):
    """Returns (Z, M, S); S = exp of an affine map so that it stays positive."""
    U = T.as_tensor(U)
    M = _linear(U, params["rep.W_m"]) + T.transpose(params["rep.B_m"])
    if not enabled:
        return M, M, T.Tensor(np.ones(M.shape))
    S = T.exp(_linear(U, params["rep.W_s"]) + T.transpose(params["rep.B_s"]))
    if not np.any(noise):
        return M, M, S
    return M + S * T.as_tensor(noise), M, S


def decode(Z, U1, params, cfg):
    """ViT decoder on [Z, U1]; returns one pixel-space row per sequence row."""
    Z, U1 = T.as_tensor(Z), T.as_tensor(U1)
    if Z.shape != U1.shape:
        raise ValueError(f"decoder inputs disagree: {Z.shape} vs {U1.shape}")
    v = (_linear(T.concat_cols([Z, U1]), params["dec.W_d"])
         + T.transpose(params["dec.B_d"]) + params["dec.P_d"])
    v = _blocks(v, params, "dec", cfg.L_dec, cfg.heads_dec, cfg)
    v = T.layernorm(v, params["dec.ln_f.gain"], params["dec.ln_f.bias"])
    return v @ params["dec.W_o"] + T.transpose(params["dec.B_o"])


def forward(A1, A2, mask, params, cfg, rng=None, noise=None, trace=None):
    """Restore the masked frame ``A2`` conditioned on the intact frame ``A1``.

    Frames are (H, W, C) with one :class:`MaskSet`, or (B, H, W, C) with a
    list of B masks of equal size. Latent noise comes from ``noise`` if given,
    else is drawn from ``rng``; with neither, inference is deterministic.
    Pass a dict as ``trace`` to receive intermediate tensors.

    Returns (G, M, S): G is the composed (..., N, P^2 C) patch matrix.
    """
    grid = cfg.grid
    masks = _as_masks(mask)
    A1, A2 = np.asarray(A1, dtype=np.float64), np.asarray(A2, dtype=np.float64)
    batched = A1.ndim == 4
    if not batched:
        A1, A2 = A1[None], A2[None]
    if len(masks) != A1.shape[0] or A1.shape != A2.shape:
        raise ValueError(f"{len(masks)} masks for frames {A1.shape} / {A2.shape}")
    if len({len(m) for m in masks}) != 1:
        raise ValueError("all masks in a batch must hide the same number of patches")
    if any(m.N != grid.N for m in masks):
        raise ValueError("mask patch count does not match grid")

    everything = np.arange(grid.N)
    vis = np.stack([m.visible_array() for m in masks])
    X1 = np.stack([patchify(a, grid) for a in A1])
    X2 = np.stack([patchify(a, grid, v) for a, v in zip(A2, vis)])
    if not batched:
        X1, X2, vis = X1[0], X2[0], vis[0]
        masks_arg = masks[0]
    else:
        masks_arg = masks
        everything = np.broadcast_to(everything, (len(masks), grid.N))

    U1 = siamvit_encode(X1, everything, params, cfg)
    U2 = siamvit_encode(X2, vis, params, cfg)
    U = assemble_latent_input(U1, U2, masks_arg, params["enc.t"])
    if noise is None:
        shape = U1.shape
        noise = rng.standard_normal(shape) if rng is not None else np.zeros(shape)
    Z, M, S = reparameterize(U, params, noise, enabled=cfg.reparam_enabled)
    O = decode(Z, U1, params, cfg)
    G = compose_output(O, X2, masks_arg)
    if trace is not None:
        trace.update(X1=X1, X2=X2, U1=U1, U2=U2, U=U, Z=Z, O=O)
    return G, M, S
