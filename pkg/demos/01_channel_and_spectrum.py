# %% [markdown]
# # From geometry to a PSD matrix
#
# A walk through the simulator: place primary and secondary users, look at
# how much the reflecting surface adds to each link, and synthesise a few
# labelled PSD snapshots. Run with `python demos/01_channel_and_spectrum.py`.

# %%
import warnings

import numpy as np

from irs_sensing import channel as C
from irs_sensing import simgen as S

rng = np.random.default_rng(7)

# %% [markdown]
# Eight PUs sit in a small disc, four SUs in another disc 200 m away and the
# surface sits at the centroid of everyone.

# %%
env = C.cluster_geometry(8, 4, rng)
print("IRS position:", np.round(env.irs_position, 1))
print("mean PU-SU distance: %.1f m" % env.direct_distances().mean())

# %% [markdown]
# `link_gains` draws shadowing snapshots and returns the direct and reflected
# power gains separately. Turning the surface off keeps the same direct-path
# draws, so the two cases can be compared link by link.

# %%
direct, reflected = C.link_gains(env, np.random.default_rng(1), 500)
off_direct, off_reflected = C.link_gains(env.with_irs(False), np.random.default_rng(1), 500)
assert np.array_equal(direct, off_direct) and not off_reflected.any()
boost_db = 10 * np.log10((direct + reflected).mean(axis=0) / direct.mean(axis=0))
print("per-link IRS boost (dB), SU x PU:")
print(np.round(boost_db, 1))

# %% [markdown]
# With 100 coincident, phase-aligned elements the reflected term is exactly
# 100 times that of a single element.

# %%
pair = dict(shadowing=C.ShadowingModel(enabled=False))
one = C.irs_gain(0, 0, C.ChannelEnv([[0, 0]], [[100, 0]], C.IrsConfig(1, (50, 20)), **pair), rng)
many = C.irs_gain(0, 0, C.ChannelEnv([[0, 0]], [[100, 0]], C.IrsConfig(100, (50, 20)), **pair), rng)
print("100 elements / 1 element =", many / one)

with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    C.irs_gain(0, 0, env.with_irs(False), rng)
print("disabled surface warns:", caught[0].category.__name__)

# %% [markdown]
# Received strength above the noise floor, with and without the surface. The
# noise floor is fixed by the nominal SNR against the direct-path reference.

# %%
for snr in (-16, -14, -12, -10):
    on = C.received_strength_db(env, snr, np.random.default_rng(2))
    off = C.received_strength_db(env.with_irs(False), snr, np.random.default_rng(2))
    print(f"SNR {snr:>4} dB: with IRS {on:6.2f} dB, without {off:6.2f} dB")

# %% [markdown]
# ## PSD snapshots
#
# Each snapshot is an `N_w x N_f` matrix: columns are bands, rows are the
# frequency points inside a band. Busy bands carry the PU power scaled by the
# link gain plus a little leakage into their neighbours.

# %%
cfg = S.SpectrumConfig(n_bands=8, n_points=32, snr_db=-10.0, n_frames=16)
x, y = S.synthesize_batch(env, cfg, np.zeros(3, dtype=int), np.random.default_rng(3))
for psd, labels in zip(x, y):
    col_db = 10 * np.log10(psd.mean(axis=0))
    print("labels", labels.tolist(), "column mean dB", np.round(col_db, 1).tolist())

# %% [markdown]
# The same kind of spectrum can be produced from a time series: the DFT of its
# circular autocorrelation equals the periodogram (Wiener-Khinchin).

# %%
series = np.random.default_rng(4).normal(size=64)
psd = S.psd_from_time_series(series)
print("max |psd - |DFT|^2| =", np.abs(psd - np.abs(np.fft.fft(series)) ** 2).max())

# %% [markdown]
# A full dataset bundles train and test splits with the normalisation fitted on
# the training split.

# %%
ds = S.make_dataset(env, cfg, 400, 100, np.random.default_rng(5))
feats = ds.features("train")
print("train features", feats.shape, "mean %.3f std %.3f" % (feats.mean(), feats.std()))
print("busy fraction in labels: %.3f" % ds.train_labels.mean())
