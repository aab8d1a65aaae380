"""Full-reference quality metrics on 0-255 images: MSE, MAE, PSNR, SSIM, FSIM."""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d

from . import kernels

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])

# SSIM constants (Wang et al. reference values)
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0

# FSIM constants (Zhang et al. reference values)
FSIM_T1 = 0.85
FSIM_T2 = 160.0
FSIM_MIN_SIZE = 32
PC_SCALES = 4
PC_ORIENTS = 4
PC_MIN_WAVELENGTH = 6.0
PC_MULT = 2.0
PC_SIGMA_ONF = 0.55
PC_DTHETA_ON_SIGMA = 1.2
PC_K = 2.0
PC_EPS = 1e-4


def constants():
    """Every metric constant in use, for writing next to reports."""
    return {k: v for k, v in globals().items()
            if k.isupper() and isinstance(v, (int, float)) and not isinstance(v, bool)}


@dataclass(frozen=True)
class MetricReport:
    mse: float
    mae: float
    psnr: float
    ssim: float
    fsim: float

    def as_dict(self):
        return asdict(self)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b, where=None):
    a, b = _pair(a, b)
    d = (a - b) ** 2
    return float(d.mean() if where is None else d[where].mean())


def mae(a, b, where=None):
    a, b = _pair(a, b)
    d = np.abs(a - b)
    return float(d.mean() if where is None else d[where].mean())


def psnr_from_mse(m, cap=PSNR_CAP):
    if m <= 0:
        return cap
    return min(10.0 * math.log10(DATA_RANGE ** 2 / m), cap)


def psnr(a, b, where=None, cap=PSNR_CAP):
    return psnr_from_mse(mse(a, b, where), cap)


def to_luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            return img[:, :, 0]
        return img @ LUMA
    return img


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-x * x / (2.0 * sigma * sigma))
    return w / w.sum()


def ssim(a, b):
    """Mean SSIM over all valid 11x11 Gaussian windows of the luminance."""
    a, b = _pair(to_luma(a), to_luma(b))
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape}")
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    w = gaussian_window()
    f = kernels.filter_valid
    mu_a, mu_b = f(a, w), f(b, w)
    saa = f(a * a, w) - mu_a * mu_a
    sbb = f(b * b, w) - mu_b * mu_b
    sab = f(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------- FSIM

def _freq_grid(n):
    if n % 2:
        return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
    return np.arange(-n / 2, n / 2) / n


def lowpass_filter(rows, cols, cutoff=0.45, order=15):
    x, y = np.meshgrid(_freq_grid(cols), _freq_grid(rows))
    radius = np.sqrt(x * x + y * y)
    return np.fft.ifftshift(1.0 / (1.0 + (radius / cutoff) ** (2 * order)))


def log_gabor_bank(rows, cols):
    """(radial filters per scale, angular spreads per orientation), FFT layout."""
    x, y = np.meshgrid(_freq_grid(cols), _freq_grid(rows))
    radius = np.fft.ifftshift(np.sqrt(x * x + y * y))
    theta = np.fft.ifftshift(np.arctan2(-y, x))
    radius[0, 0] = 1.0
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    lp = lowpass_filter(rows, cols)
    radial = []
    for s in range(PC_SCALES):
        fo = 1.0 / (PC_MIN_WAVELENGTH * PC_MULT ** s)
        g = np.exp(-(np.log(radius / fo)) ** 2 / (2 * math.log(PC_SIGMA_ONF) ** 2)) * lp
        g[0, 0] = 0.0
        radial.append(g)
    theta_sigma = math.pi / PC_ORIENTS / PC_DTHETA_ON_SIGMA
    spread = []
    for o in range(PC_ORIENTS):
        ang = o * math.pi / PC_ORIENTS
        ds = sin_t * math.cos(ang) - cos_t * math.sin(ang)
        dc = cos_t * math.cos(ang) + sin_t * math.sin(ang)
        dtheta = np.abs(np.arctan2(ds, dc))
        spread.append(np.exp(-dtheta ** 2 / (2 * theta_sigma ** 2)))
    return radial, spread


def phase_congruency(img):
    """Kovesi phase congruency (the variant used inside FSIM)."""
    rows, cols = img.shape
    spectrum = np.fft.fft2(img)
    radial, spread = log_gabor_bank(rows, cols)
    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    for o in range(PC_ORIENTS):
        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        eo = []
        ifft_filters = []
        for s in range(PC_SCALES):
            filt = radial[s] * spread[o]
            ifft_filters.append(np.real(np.fft.ifft2(filt)) * math.sqrt(rows * cols))
            r = np.fft.ifft2(spectrum * filt)
            eo.append(r)
            sum_an += np.abs(r)
            sum_e += r.real
            sum_o += r.imag
            if s == 0:
                em_n = np.sum(filt ** 2)
        x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + PC_EPS
        mean_e = sum_e / x_energy
        mean_o = sum_o / x_energy
        energy = np.zeros((rows, cols))
        for r in eo:
            e, od = r.real, r.imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)
        median_e2n = np.median(np.abs(eo[0]) ** 2)
        mean_e2n = -median_e2n / math.log(0.5)
        noise_power = mean_e2n / em_n
        est_sum_an2 = sum(f ** 2 for f in ifft_filters)
        est_sum_aiaj = np.zeros((rows, cols))
        for i in range(PC_SCALES - 1):
            for j in range(i + 1, PC_SCALES):
                est_sum_aiaj += ifft_filters[i] * ifft_filters[j]
        est_noise_energy2 = (2 * noise_power * est_sum_an2.sum()
                             + 4 * noise_power * est_sum_aiaj.sum())
        tau = math.sqrt(est_noise_energy2 / 2)
        est_noise = tau * math.sqrt(math.pi / 2)
        est_noise_sigma = math.sqrt((2 - math.pi / 2) * tau ** 2)
        thresh = (est_noise + PC_K * est_noise_sigma) / 1.7
        energy_all += np.maximum(energy - thresh, 0.0)
        an_all += sum_an
    out = np.zeros((rows, cols))
    np.divide(energy_all, an_all, out=out, where=an_all > 0)
    return out


SCHARR_X = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]]) / 16.0
SCHARR_Y = SCHARR_X.T


def gradient_magnitude(img):
    gx = convolve2d(img, SCHARR_X, mode="same")
    gy = convolve2d(img, SCHARR_Y, mode="same")
    return np.sqrt(gx * gx + gy * gy)


def _fsim_downsample(img):
    rows, cols = img.shape
    f = max(1, round(min(rows, cols) / 256))
    if f == 1:
        return img
    k = np.ones((f, f)) / (f * f)
    return convolve2d(img, k, mode="same")[::f, ::f]


def fsim(a, b):
    """Luminance FSIM: phase-congruency-weighted PC and gradient similarity."""
    a, b = _pair(to_luma(a), to_luma(b))
    if min(a.shape) < FSIM_MIN_SIZE:
        raise ValueError(f"FSIM needs images of at least {FSIM_MIN_SIZE}x{FSIM_MIN_SIZE}")
    a, b = _fsim_downsample(a), _fsim_downsample(b)
    pc_a, pc_b = phase_congruency(a), phase_congruency(b)
    g_a, g_b = gradient_magnitude(a), gradient_magnitude(b)
    s_pc = (2 * pc_a * pc_b + FSIM_T1) / (pc_a ** 2 + pc_b ** 2 + FSIM_T1)
    s_g = (2 * g_a * g_b + FSIM_T2) / (g_a ** 2 + g_b ** 2 + FSIM_T2)
    pcm = np.maximum(pc_a, pc_b)
    wsum = pcm.sum()
    if wsum <= 0:
        # featureless inputs: fall back to the unweighted mean similarity
        return float((s_pc * s_g).mean())
    return float((s_pc * s_g * pcm).sum() / wsum)


# ---------------------------------------------------------------- reports

def evaluate_images(a, b, where=None):
    """All five metrics for one image pair; ``where`` restricts MSE/MAE/PSNR."""
    m = mse(a, b, where)
    return MetricReport(mse=m, mae=mae(a, b, where), psnr=psnr_from_mse(m),
                        ssim=ssim(a, b), fsim=fsim(a, b))


def aggregate(reports):
    """Mean of per-image values, PSNR included."""
    if not reports:
        raise ValueError("no reports to aggregate")
    keys = MetricReport.__dataclass_fields__.keys()
    return MetricReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})
