"""Patch geometry, mask sampling and position-preserving row scatter.

Patches are enumerated row-major over the grid. Inside a patch, values are
flattened in (pixel-row, pixel-col, channel) order.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T


class DegenerateMaskError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    H: int
    W: int
    C: int
    P: int

    def __post_init__(self):
        if min(self.H, self.W, self.C, self.P) < 1:
            raise ValueError(f"grid extents must be positive: {self}")
        if self.H % self.P or self.W % self.P:
            raise ValueError(f"patch size {self.P} must divide {self.H}x{self.W}")

    @property
    def N(self):
        return (self.H // self.P) * (self.W // self.P)

    @property
    def patch_dim(self):
        return self.P * self.P * self.C

    @property
    def rows(self):
        return self.H // self.P

    @property
    def cols(self):
        return self.W // self.P


@dataclass(frozen=True)
class MaskSet:
    """Sorted masked patch indices out of ``N``."""

    masked: tuple
    N: int

    def __post_init__(self):
        m = tuple(int(i) for i in self.masked)
        if any(b <= a for a, b in zip(m, m[1:])):
            m = tuple(sorted(set(m)))
        if m and (m[0] < 0 or m[-1] >= self.N):
            raise IndexError(f"mask index out of range [0, {self.N})")
        object.__setattr__(self, "masked", m)

    @property
    def visible(self):
        hidden = set(self.masked)
        return tuple(i for i in range(self.N) if i not in hidden)

    def masked_array(self):
        return np.asarray(self.masked, dtype=np.intp)

    def visible_array(self):
        return np.asarray(self.visible, dtype=np.intp)

    def __len__(self):
        return len(self.masked)


def _mask_count(ratio, N):
    if not 0.0 < ratio < 1.0:
        raise DegenerateMaskError(f"mask ratio must lie in (0, 1), got {ratio}")
    k = int(round(ratio * N))
    if k in (0, N):
        raise DegenerateMaskError(f"ratio {ratio} of {N} patches masks {k}")
    return k


def sample_mask(ratio, N, rng):
    """Uniform draw of round(ratio*N) patch indices without replacement."""
    k = _mask_count(ratio, N)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return MaskSet(tuple(np.sort(rng.choice(N, size=k, replace=False))), N)


def sample_block_mask(ratio, N, rng):
    """One contiguous run of round(ratio*N) patches in raster order."""
    k = _mask_count(ratio, N)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    start = int(rng.integers(0, N - k + 1))
    return MaskSet(tuple(range(start, start + k)), N)


def _patch_view(image, grid):
    """(rows, cols, P, P, C) view of an H x W x C array."""
    g = grid
    return image.reshape(g.rows, g.P, g.cols, g.P, g.C).transpose(0, 2, 1, 3, 4)


def patchify(image, grid, keep=None):
    """Flatten the patches listed in ``keep`` (default all) into rows."""
    img = np.asarray(image.data if isinstance(image, T.Tensor) else image, dtype=np.float64)
    if img.ndim == 2 and grid.C == 1:
        img = img[:, :, None]
    if img.shape != (grid.H, grid.W, grid.C):
        raise ValueError(f"image shape {img.shape} does not match grid {grid}")
    rows = _patch_view(img, grid).reshape(grid.N, grid.patch_dim)
    if keep is None:
        return rows.copy()
    keep = np.asarray(keep, dtype=np.intp)
    if keep.size and (keep.min() < 0 or keep.max() >= grid.N):
        raise IndexError(f"patch index out of range [0, {grid.N})")
    if keep.size > 1 and (np.diff(keep) <= 0).any():
        raise ValueError("keep indices must be strictly ascending")
    return rows[keep]


def unpatchify(rows, grid):
    """Inverse of :func:`patchify` with every patch kept."""
    r = np.asarray(rows.data if isinstance(rows, T.Tensor) else rows, dtype=np.float64)
    if r.shape != (grid.N, grid.patch_dim):
        raise ValueError(f"expected {grid.N}x{grid.patch_dim} rows, got {r.shape}")
    g = grid
    img = r.reshape(g.rows, g.cols, g.P, g.P, g.C).transpose(0, 2, 1, 3, 4)
    return img.reshape(g.H, g.W, g.C).copy()


def scatter_rows(x, positions, total):
    """Rows of ``x`` land at ``positions`` of a zero matrix with ``total`` rows."""
    return T.scatter_rows(x, positions, total)


def compose_output(O, x2_visible, mask):
    """Visible rows come from the input patches; masked rows from the prediction.

    ``O`` carries a class-token row 0, so patch j reads prediction row j + 1.
    Works on single (N+1, d) inputs or batches with one mask per item.
    """
    masks = [mask] if isinstance(mask, MaskSet) else list(mask)
    N = masks[0].N
    O = T.as_tensor(O)
    x2_visible = T.as_tensor(x2_visible)
    if O.shape[-2] != N + 1:
        raise ValueError(f"prediction has {O.shape[-2]} rows, expected {N + 1}")
    vis = np.stack([m.visible_array() for m in masks])
    hid = np.stack([m.masked_array() for m in masks])
    if O.ndim == 2:
        vis, hid = vis[0], hid[0]
    if x2_visible.shape[-2] != vis.shape[-1] or x2_visible.shape[-1] != O.shape[-1]:
        raise ValueError(f"visible patches {x2_visible.shape} do not fit mask/prediction")
    parts = []
    if vis.shape[-1]:
        parts.append(T.scatter_rows(x2_visible, vis, N))
    if hid.shape[-1]:
        parts.append(T.scatter_rows(T.gather_rows(O, hid + 1), hid, N))
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out
