"""Large-scale channel gains between primary and secondary users, with an optional IRS.

All gains are real, non-negative power-gain factors of the form
``beta * (d0 / d) ** alpha * 10 ** (-psi / 10)``. The reflected path through
an M-element surface sums, per element, the product of the PU->element and
element->SU factors, each carrying its own shadowing draw.
"""

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class IrsDisabledWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PathLossParams:
    beta: float = 10 ** 3.154
    d0: float = 1.0
    alpha: float = 3.71

    def __post_init__(self):
        for name in ("beta", "d0", "alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class ShadowingModel:
    """Log-normal shadowing: ``psi ~ Normal(0, sigma_db**2)`` in dB."""

    sigma_db: float = 8.0
    enabled: bool = True

    def __post_init__(self):
        if self.sigma_db < 0:
            raise ValueError("sigma_db must be non-negative")


class PhasePolicy(str, enum.Enum):
    ALIGNED = "aligned"
    ZERO = "zero"
    RANDOM = "random"


@dataclass(frozen=True)
class IrsConfig:
    num_elements: int = 100
    position: tuple | None = None  # None: centroid of all PUs and SUs
    phase_policy: PhasePolicy = PhasePolicy.ALIGNED

    def __post_init__(self):
        if self.num_elements < 1:
            raise ValueError("an IRS needs at least one element")
        object.__setattr__(self, "phase_policy", PhasePolicy(self.phase_policy))


@dataclass
class ChannelEnv:
    pu_positions: np.ndarray  # (n_pu, 2) metres; PU n transmits on band n
    su_positions: np.ndarray  # (n_su, 2)
    irs: IrsConfig = field(default_factory=IrsConfig)
    pathloss: PathLossParams = field(default_factory=PathLossParams)
    shadowing: ShadowingModel = field(default_factory=ShadowingModel)
    irs_enabled: bool = True

    def __post_init__(self):
        self.pu_positions = np.atleast_2d(np.asarray(self.pu_positions, dtype=float))
        self.su_positions = np.atleast_2d(np.asarray(self.su_positions, dtype=float))
        if self.irs.position is None:
            centroid = np.vstack([self.pu_positions, self.su_positions]).mean(axis=0)
            self.irs = IrsConfig(self.irs.num_elements, tuple(centroid), self.irs.phase_policy)
        for name, d in (("PU-SU", self.direct_distances()),
                        ("PU-IRS", self.pu_irs_distances()),
                        ("IRS-SU", self.irs_su_distances())):
            if np.any(d <= 0):
                raise ValueError(f"coinciding positions: a {name} distance is zero")

    @property
    def n_pu(self):
        return len(self.pu_positions)

    @property
    def n_su(self):
        return len(self.su_positions)

    @property
    def irs_position(self):
        return np.asarray(self.irs.position, dtype=float)

    def direct_distances(self):
        """``(n_su, n_pu)`` PU-to-SU distances."""
        diff = self.su_positions[:, None, :] - self.pu_positions[None, :, :]
        return np.linalg.norm(diff, axis=-1)

    def pu_irs_distances(self):
        return np.linalg.norm(self.pu_positions - self.irs_position, axis=-1)

    def irs_su_distances(self):
        return np.linalg.norm(self.su_positions - self.irs_position, axis=-1)

    def with_irs(self, enabled):
        return ChannelEnv(self.pu_positions, self.su_positions, self.irs, self.pathloss,
                          self.shadowing, enabled)


def random_geometry(n_pu, n_su, rng, area=500.0, **kwargs) -> ChannelEnv:
    """PUs and SUs uniform in an ``area`` x ``area`` square, IRS at their centroid."""
    pu = rng.uniform(0, area, size=(n_pu, 2))
    su = rng.uniform(0, area, size=(n_su, 2))
    return ChannelEnv(pu, su, **kwargs)


def split_geometry(n_pu, n_su, rng, area=500.0, **kwargs) -> ChannelEnv:
    """PUs in the left third and SUs in the right third of the square.

    The IRS then lands at the centroid, between the two groups.
    """
    pu = np.column_stack([rng.uniform(0, area / 3, n_pu), rng.uniform(0, area, n_pu)])
    su = np.column_stack([rng.uniform(2 * area / 3, area, n_su), rng.uniform(0, area, n_su)])
    return ChannelEnv(pu, su, **kwargs)


def _disc(rng, n, center, radius):
    # uniform over the disc area, hence the square root on the radius draw
    angle = rng.uniform(0.0, 2 * np.pi, n)
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    return np.column_stack([center[0] + r * np.cos(angle), center[1] + r * np.sin(angle)])


def cluster_geometry(n_pu, n_su, rng, separation=200.0, radius=25.0, **kwargs) -> ChannelEnv:
    """PUs in a disc at the origin, SUs in a disc ``separation`` metres away along x.

    Every PU-SU link then has roughly the same length, so one SNR value
    describes all of them; the IRS sits at the centroid between the clusters.
    """
    if separation <= 2 * radius:
        raise ValueError("clusters overlap: separation must exceed twice the radius")
    pu = _disc(rng, n_pu, (0.0, 0.0), radius)
    su = _disc(rng, n_su, (separation, 0.0), radius)
    return ChannelEnv(pu, su, **kwargs)


GEOMETRIES = {"cluster": cluster_geometry, "uniform": random_geometry, "split": split_geometry}


def direct_gain(d, psi_db, p: PathLossParams):
    """``beta * (d0/d)**alpha * 10**(-psi/10)``; broadcasts over arrays."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    out = p.beta * (p.d0 / d) ** p.alpha * 10.0 ** (-np.asarray(psi_db, dtype=float) / 10.0)
    return out if out.ndim else float(out)


def sample_shadowing(rng, model: ShadowingModel, size=None):
    if not model.enabled or model.sigma_db == 0:
        return 0.0 if size is None else np.zeros(size)
    return rng.normal(0.0, model.sigma_db, size=size)


def cascade_element_gain(d_im, psi_im, d_mj, psi_mj, p: PathLossParams):
    """PU->element factor times element->SU factor for one reflecting element."""
    return direct_gain(d_im, psi_im, p) * direct_gain(d_mj, psi_mj, p)


def _combine(element_gains, policy, rng):
    """Sum element contributions over the last axis under a phase policy."""
    if policy is PhasePolicy.RANDOM:
        theta = rng.uniform(0.0, 2 * np.pi, size=element_gains.shape)
        return np.abs((element_gains * np.exp(1j * theta)).sum(axis=-1))
    # aligned phases add coherently; with real non-negative element gains a
    # zero phase shift is the same sum
    return _exact_sum(element_gains)


# With a 64-bit mantissa every partial sum of up to 2**11 equal float64 terms
# is exact, so the single rounding back to float64 makes M equal terms g sum
# to exactly M * g. Where long double is plain double, fall back to fsum.
_WIDE = np.finfo(np.longdouble).nmant >= 63


def _exact_sum(a):
    if _WIDE:
        return a.astype(np.longdouble).sum(axis=-1).astype(np.float64)
    M = a.shape[-1]
    return np.array([math.fsum(r) for r in a.reshape(-1, M).tolist()]).reshape(a.shape[:-1])


def irs_gain(pu_idx, su_idx, env: ChannelEnv, rng):
    """Reflected gain from PU ``pu_idx`` to SU ``su_idx``.

    Returns 0.0 with an :class:`IrsDisabledWarning` when the IRS is off.
    """
    if not env.irs_enabled:
        warnings.warn("IRS disabled; reflected gain is 0", IrsDisabledWarning, stacklevel=2)
        return 0.0
    M = env.irs.num_elements
    psi_im = sample_shadowing(rng, env.shadowing, M)
    psi_mj = sample_shadowing(rng, env.shadowing, M)
    g = cascade_element_gain(env.pu_irs_distances()[pu_idx], psi_im,
                             env.irs_su_distances()[su_idx], psi_mj, env.pathloss)
    return float(_combine(np.asarray(g), env.irs.phase_policy, rng))


def total_gain(pu_idx, su_idx, env: ChannelEnv, rng):
    psi = sample_shadowing(rng, env.shadowing)
    h = direct_gain(env.direct_distances()[su_idx, pu_idx], psi, env.pathloss)
    if env.irs_enabled:
        h += irs_gain(pu_idx, su_idx, env, rng)
    return h


def link_gains(env: ChannelEnv, rng, n_samples, su_idx=None):
    """Vectorised total gains for ``n_samples`` independent shadowing snapshots.

    Returns ``(direct, reflected)``, each ``(n_samples, n_su, n_pu)`` (or
    ``(n_samples, n_pu)`` when ``su_idx`` picks a single SU). ``reflected`` is
    all zeros when the IRS is disabled; the random draws are made either way
    so that toggling the IRS leaves the direct-path shadowing unchanged.
    """
    d = env.direct_distances()
    d_pi = env.pu_irs_distances()
    d_is = env.irs_su_distances()
    if su_idx is not None:
        d, d_is = d[su_idx:su_idx + 1], d_is[su_idx:su_idx + 1]
    J, N = d.shape
    M = env.irs.num_elements
    psi = sample_shadowing(rng, env.shadowing, (n_samples, J, N))
    direct = direct_gain(d, psi, env.pathloss)
    psi_im = sample_shadowing(rng, env.shadowing, (n_samples, J, N, M))
    psi_mj = sample_shadowing(rng, env.shadowing, (n_samples, J, N, M))
    elem = cascade_element_gain(d_pi[None, None, :, None], psi_im,
                                d_is[None, :, None, None], psi_mj, env.pathloss)
    reflected = _combine(np.asarray(elem), env.irs.phase_policy, rng)
    if not env.irs_enabled:
        reflected = np.zeros_like(reflected)
    if su_idx is not None:
        return direct[:, 0], reflected[:, 0]
    return direct, reflected


def sampled_link_gains(env: ChannelEnv, rng, su_per_sample):
    """Like :func:`link_gains`, but only for one SU per snapshot.

    ``su_per_sample[i]`` picks the receiving SU of snapshot ``i``; returns
    ``(direct, reflected)`` of shape ``(n, n_pu)``. Draws do not depend on
    whether the IRS is enabled.
    """
    su = np.asarray(su_per_sample, dtype=int)
    n, N, M = len(su), env.n_pu, env.irs.num_elements
    d = env.direct_distances()[su]
    d_is = env.irs_su_distances()[su]
    direct = direct_gain(d, sample_shadowing(rng, env.shadowing, (n, N)),
                         env.pathloss)
    psi_im = sample_shadowing(rng, env.shadowing, (n, N, M))
    psi_mj = sample_shadowing(rng, env.shadowing, (n, N, M))
    elem = cascade_element_gain(env.pu_irs_distances()[None, :, None], psi_im,
                                d_is[:, None, None], psi_mj, env.pathloss)
    reflected = _combine(np.asarray(elem), env.irs.phase_policy, rng)
    if not env.irs_enabled:
        reflected = np.zeros_like(reflected)
    return direct, reflected


def mean_direct_gain(env: ChannelEnv, log_domain=True):
    """Reference direct gain over all PU-SU links, without shadowing.

    With ``log_domain`` the average is taken in dB (a geometric mean), which
    keeps a handful of very short links from setting the reference.
    """
    g = direct_gain(env.direct_distances(), 0.0, env.pathloss)
    if log_domain:
        return float(10 ** np.mean(np.log10(g)))
    return float(np.mean(g))


def received_strength_db(env: ChannelEnv, snr_db, rng, n_samples=200, pu_power=1.0):
    """Mean received power (signal plus noise) relative to the noise floor, in dB.

    Noise is fixed by ``snr_db`` against the direct-path reference gain, so the
    IRS lifts only the signal part.
    """
    noise = mean_direct_gain(env) * pu_power / 10 ** (snr_db / 10)
    direct, reflected = link_gains(env, rng, n_samples)
    power = (direct + reflected) * pu_power + noise
    return float(10 * np.log10(np.mean(power) / noise))
