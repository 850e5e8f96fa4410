"""Labelled wideband PSD datasets.

Each sample is an ``N_w x N_f`` PSD matrix seen by one SU: column ``n`` holds
band ``n``'s received PU power (if the band is busy), leakage from busy
neighbouring bands, and noise. Labels are the per-band occupancy bits.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .channel import ChannelEnv, mean_direct_gain, sampled_link_gains

DB_EPS = 1e-12


@dataclass(frozen=True)
class SpectrumConfig:
    n_bands: int = 20
    n_points: int = 64
    p_busy: float = 0.5
    leakage: float = 0.1
    pu_power: float = 1.0
    snr_db: float = -10.0
    # periodogram frames averaged into each PSD point; 1 gives the raw
    # exponential per-bin noise of a single periodogram
    n_frames: int = 1

    def __post_init__(self):
        if self.n_bands < 1 or self.n_points < 1:
            raise ValueError("n_bands and n_points must be >= 1")
        if not 0 <= self.p_busy <= 1:
            raise ValueError("p_busy must lie in [0, 1]")
        if not 0 <= self.leakage <= 1:
            raise ValueError("leakage must lie in [0, 1]")
        if not self.pu_power > 0:
            raise ValueError("pu_power must be positive")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")


@dataclass
class PsdSample:
    psd: np.ndarray  # (N_w, N_f), linear
    labels: np.ndarray  # (N_f,), 1 = busy

    def __post_init__(self):
        if np.any(self.psd < 0):
            raise ValueError("PSD entries must be non-negative")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")


def sample_occupancy(rng, cfg: SpectrumConfig, size=None):
    shape = (cfg.n_bands,) if size is None else (size, cfg.n_bands)
    return (rng.random(shape) < cfg.p_busy).astype(np.int8)


def noise_psd_for_snr(env: ChannelEnv, cfg: SpectrumConfig):
    """Noise level putting the reference direct-path link at ``cfg.snr_db``."""
    return mean_direct_gain(env) * cfg.pu_power / 10 ** (cfg.snr_db / 10)


def leakage_matrix(n_bands, eta):
    """``L[n, n']`` = share of band n' power that lands in band n (immediate neighbours)."""
    L = np.zeros((n_bands, n_bands))
    idx = np.arange(n_bands - 1)
    L[idx, idx + 1] = eta
    L[idx + 1, idx] = eta
    return L


def _noise(rng, shape, noise_psd, n_frames):
    # mean of n_frames exponential periodogram bins
    return rng.gamma(n_frames, noise_psd / n_frames, size=shape)


def band_levels(occupancy, gains, cfg: SpectrumConfig, leak_gains=None):
    """Noise-free per-band level: own signal plus leakage from busy neighbours.

    ``leak_gains`` defaults to ``gains``; synthesis passes the direct-path
    gains because leakage over the reflected link is not modelled.
    """
    occupancy = np.asarray(occupancy)
    gains = np.asarray(gains, dtype=float)
    if gains.shape[-1] != cfg.n_bands or occupancy.shape[-1] != cfg.n_bands:
        raise ValueError(f"expected {cfg.n_bands} bands, got gains {gains.shape}, "
                         f"occupancy {occupancy.shape}")
    leak_gains = gains if leak_gains is None else np.asarray(leak_gains, dtype=float)
    own = gains * cfg.pu_power * occupancy
    leaked = (leak_gains * cfg.pu_power * occupancy) @ leakage_matrix(cfg.n_bands, cfg.leakage).T
    return own + leaked


def band_psd(occupancy, gains, cfg: SpectrumConfig, noise_psd, rng, leak_gains=None):
    """One ``N_w x N_f`` PSD matrix: flat band levels plus per-point noise."""
    if not noise_psd > 0:
        raise ValueError("noise_psd must be positive")
    level = band_levels(occupancy, gains, cfg, leak_gains)
    if level.ndim != 1:
        raise ValueError("band_psd builds a single sample; use synthesize_batch for many")
    return level[None, :] + _noise(rng, (cfg.n_points, cfg.n_bands), noise_psd, cfg.n_frames)


def synthesize_batch(env: ChannelEnv, cfg: SpectrumConfig, su_idx, rng, noise_psd=None, chunk=256):
    """PSD matrices ``(n, N_w, N_f)`` and labels ``(n, N_f)`` for the SUs listed in ``su_idx``.

    Per sample: occupancy, a fresh shadowing snapshot on every link, then the
    noisy matrix. Draws are made chunk by chunk in a fixed order.
    """
    if env.n_pu != cfg.n_bands:
        raise ValueError(f"{env.n_pu} PUs for {cfg.n_bands} bands; need one PU per band")
    su_idx = np.asarray(su_idx, dtype=int)
    if noise_psd is None:
        noise_psd = noise_psd_for_snr(env, cfg)
    n = len(su_idx)
    psd = np.empty((n, cfg.n_points, cfg.n_bands))
    labels = np.empty((n, cfg.n_bands), dtype=np.int8)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        m = sl.stop - sl.start
        occ = sample_occupancy(rng, cfg, m)
        d, reflected = sampled_link_gains(env, rng, su_idx[sl])
        level = band_levels(occ, d + reflected, cfg, leak_gains=d)
        psd[sl] = level[:, None, :] + _noise(rng, (m, cfg.n_points, cfg.n_bands), noise_psd,
                                             cfg.n_frames)
        labels[sl] = occ
    return psd, labels


def synthesize_sample(env: ChannelEnv, cfg: SpectrumConfig, su_idx, rng, noise_psd=None):
    psd, labels = synthesize_batch(env, cfg, [su_idx], rng, noise_psd)
    return PsdSample(psd[0], labels[0])


# -- time-series path ---------------------------------------------------------

def psd_from_time_series(y, n_points=None, n_bands=None):
    """DFT of the circular autocorrelation of ``y``.

    By Wiener-Khinchin this equals ``|DFT(y)|**2``; the autocorrelation is
    formed explicitly (via FFT) and transformed, and the real part returned.
    If ``n_points``/``n_bands`` are given the length must equal their product.
    """
    y = np.asarray(y)
    if y.ndim != 1 or len(y) < 2:
        raise ValueError("need a 1-D sequence of length >= 2")
    if n_points is not None and n_bands is not None and len(y) != n_points * n_bands:
        raise ValueError(f"length {len(y)} != {n_points} * {n_bands}")
    Y = np.fft.fft(y)
    r = np.fft.ifft(np.abs(Y) ** 2)  # r[k] = sum_t y[t+k] conj(y[t]), circular
    return np.fft.fft(r).real


def synthesize_time_series(occupancy, gains, cfg: SpectrumConfig, noise_psd, rng):
    """Complex baseband samples whose periodogram follows the band layout.

    Each busy band contributes white complex Gaussian noise confined to its
    ``N_w`` DFT bins, scaled to the band's received power; white noise is
    added on top. Length is ``N_w * N_f``.
    """
    L = cfg.n_points * cfg.n_bands
    level = band_levels(occupancy, gains, cfg)
    spec = np.sqrt(np.repeat(level, cfg.n_points) * L / 2) * (
        rng.normal(size=L) + 1j * rng.normal(size=L))
    noise = np.sqrt(noise_psd / 2) * (rng.normal(size=L) + 1j * rng.normal(size=L))
    return np.fft.ifft(spec) + noise


def to_matrix(psd_vector, n_points, n_bands):
    """Segment a wideband PSD into bands and stack them column-wise."""
    return np.asarray(psd_vector).reshape(n_bands, n_points).T


# -- datasets -------------------------------------------------------------------

@dataclass
class Dataset:
    """Train/test PSD tensors with SU provenance and train-fitted normalisation.

    ``*_psd`` are linear PSD tensors ``(n, N_w, N_f)``; :meth:`features` returns
    the dB-then-standardised network inputs.
    """

    train_psd: np.ndarray
    train_labels: np.ndarray
    train_su: np.ndarray
    test_psd: np.ndarray
    test_labels: np.ndarray
    test_su: np.ndarray
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            db = to_db(self.train_psd)
            self.mean = db.mean(axis=0)
            self.std = db.std(axis=0)
            self.std[self.std == 0] = 1.0

    @property
    def shape(self):
        return self.train_psd.shape[1:]

    def normalize(self, psd):
        return (to_db(psd) - self.mean) / self.std

    def features(self, split="train", dtype=np.float64):
        psd = self.train_psd if split == "train" else self.test_psd
        return self.normalize(psd).astype(dtype)

    def labels(self, split="train"):
        return self.train_labels if split == "train" else self.test_labels

    def su(self, split="train"):
        return self.train_su if split == "train" else self.test_su

    def samples(self, split="train"):
        psd, lab = (self.train_psd, self.train_labels) if split == "train" else (
            self.test_psd, self.test_labels)
        return [PsdSample(p, y) for p, y in zip(psd, lab)]

    def subset(self, su_idx):
        """Restrict both splits to samples from the given SUs (normalisation kept)."""
        tr = np.isin(self.train_su, su_idx)
        te = np.isin(self.test_su, su_idx)
        return Dataset(self.train_psd[tr], self.train_labels[tr], self.train_su[tr],
                       self.test_psd[te], self.test_labels[te], self.test_su[te],
                       self.mean, self.std)


def to_db(psd):
    return 10 * np.log10(np.asarray(psd) + DB_EPS)


def make_dataset(env: ChannelEnv, cfg: SpectrumConfig, n_train, n_test, rng) -> Dataset:
    """Independent train and test draws, SUs assigned round-robin."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    noise = noise_psd_for_snr(env, cfg)
    su_tr = np.arange(n_train) % env.n_su
    su_te = np.arange(n_test) % env.n_su
    xtr, ytr = synthesize_batch(env, cfg, su_tr, rng, noise)
    xte, yte = synthesize_batch(env, cfg, su_te, rng, noise)
    return Dataset(xtr, ytr, su_tr, xte, yte, su_te)


# -- on-disk format -------------------------------------------------------------
#
#   b"IRSD" | u32 version=1 | u32 N_w | u32 N_f | u32 n_train | u32 n_test
#   then for train, then test:
#       n * N_w * N_f float64 PSD values (sample-major, row-major N_w x N_f)
#       n * N_f uint8 labels
#       n uint32 SU indices
#   then N_w*N_f float64 mean, N_w*N_f float64 std
# All little-endian.

_DS_MAGIC = b"IRSD"


def save_dataset(ds: Dataset, path):
    n_w, n_f = ds.shape
    with open(path, "wb") as f:
        f.write(_DS_MAGIC)
        f.write(struct.pack("<5I", 1, n_w, n_f, len(ds.train_psd), len(ds.test_psd)))
        for psd, lab, su in ((ds.train_psd, ds.train_labels, ds.train_su),
                             (ds.test_psd, ds.test_labels, ds.test_su)):
            f.write(np.ascontiguousarray(psd, "<f8").tobytes())
            f.write(np.ascontiguousarray(lab, "u1").tobytes())
            f.write(np.ascontiguousarray(su, "<u4").tobytes())
        f.write(np.ascontiguousarray(ds.mean, "<f8").tobytes())
        f.write(np.ascontiguousarray(ds.std, "<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _DS_MAGIC:
        raise ValueError("not a dataset file")
    version, n_w, n_f, n_tr, n_te = struct.unpack_from("<5I", data, 4)
    if version != 1:
        raise ValueError(f"unsupported dataset version {version}")
    off = 24
    parts = []

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.astype(np.dtype(dtype).newbyteorder("="))

    for n in (n_tr, n_te):
        parts.append(take("<f8", n * n_w * n_f, (n, n_w, n_f)))
        parts.append(take("u1", n * n_f, (n, n_f)).astype(np.int8))
        parts.append(take("<u4", n, (n,)).astype(int))
    mean = take("<f8", n_w * n_f, (n_w, n_f))
    std = take("<f8", n_w * n_f, (n_w, n_f))
    if off != len(data):
        raise ValueError("trailing bytes in dataset file")
    return Dataset(*parts, mean=mean, std=std)
