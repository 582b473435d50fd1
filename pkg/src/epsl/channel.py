"""Average link gains and FDMA link rates.

Gains follow a log-distance model with a free-space frequency term::

    PL_dB = ref_loss_db + 20 log10(F / F_ref) + 10 n log10(d) + X

where the LoS/NLoS state (exponent ``n``, shadowing spread of ``X``) is drawn
once per device.  Shadowing is also drawn once per device by default, so a
device's gain falls monotonically with subchannel frequency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def dbm_to_watt(dbm):
    return 10.0 ** (dbm / 10.0) / 1000.0


@dataclass(frozen=True)
class SubchannelSpec:
    index: int
    center_freq: float  # Hz
    bandwidth: float  # Hz

    def __post_init__(self):
        if not (self.bandwidth > 0 and self.center_freq > 0):
            raise ValueError(f"subchannel {self.index}: frequency and bandwidth must be > 0")


@dataclass(frozen=True)
class DeviceProfile:
    id: int
    compute: float  # cycles/s
    intensity: float  # cycles/FLOP
    distance: float  # m
    p_max: float  # W
    data_count: int = 1

    def __post_init__(self):
        if self.compute <= 0 or self.intensity <= 0:
            raise ValueError(f"device {self.id}: compute and intensity must be > 0")
        if self.distance <= 0:
            raise ValueError(f"device {self.id}: distance must be > 0")
        if self.p_max <= 0:
            raise ValueError(f"device {self.id}: p_max must be > 0")
        if self.data_count < 1:
            raise ValueError(f"device {self.id}: data_count must be >= 1")


@dataclass(frozen=True)
class ChannelModel:
    ref_loss_db: float = 32.44
    ref_freq: float = 1e9
    exp_los: float = 2.1
    exp_nlos: float = 3.4
    shadow_std_los_db: float = 3.6
    shadow_std_nlos_db: float = 9.7
    p_los: float = 0.5
    seed: int = 0
    antenna_gain: float = 10.0  # G_c * G_s, linear
    shadowing_per_subchannel: bool = False

    def __post_init__(self):
        if self.exp_los <= 0 or self.exp_nlos <= 0:
            raise ValueError("path loss exponents must be > 0")
        if self.shadow_std_los_db < 0 or self.shadow_std_nlos_db < 0:
            raise ValueError("shadowing standard deviations must be >= 0")
        if not 0.0 <= self.p_los <= 1.0:
            raise ValueError("p_los must lie in [0, 1]")
        if self.antenna_gain <= 0 or self.ref_freq <= 0:
            raise ValueError("antenna gain and reference frequency must be > 0")


def sample_gains(model: ChannelModel, devices, subchannels, seed=None) -> np.ndarray:
    """Draw the (devices x subchannels) table of average linear channel gains.

    Pure function of its arguments; ``seed`` overrides ``model.seed`` (used for
    per-round redraws).
    """
    if not devices or not subchannels:
        raise ValueError("need at least one device and one subchannel")
    rng = np.random.default_rng(model.seed if seed is None else seed)
    n_dev, n_sub = len(devices), len(subchannels)
    los = rng.random(n_dev) < model.p_los
    exponent = np.where(los, model.exp_los, model.exp_nlos)
    sigma = np.where(los, model.shadow_std_los_db, model.shadow_std_nlos_db)
    if model.shadowing_per_subchannel:
        shadow = rng.standard_normal((n_dev, n_sub)) * sigma[:, None]
    else:
        shadow = np.broadcast_to((rng.standard_normal(n_dev) * sigma)[:, None], (n_dev, n_sub))
    dist = np.array([d.distance for d in devices], dtype=float)
    freq = np.array([s.center_freq for s in subchannels], dtype=float)
    pl_db = (model.ref_loss_db
             + 20.0 * np.log10(freq / model.ref_freq)[None, :]
             + 10.0 * exponent[:, None] * np.log10(dist)[:, None]
             + shadow)
    gains = 10.0 ** (-pl_db / 10.0)
    gains.setflags(write=False)
    return gains


def _link_rate(bandwidths, psd, gains_row, antenna_gain, noise_psd):
    psd = np.asarray(psd, dtype=float)
    if np.any(psd < 0):
        raise ValueError("negative PSD")
    snr = psd * antenna_gain * np.asarray(gains_row, dtype=float) / noise_psd
    return float(np.sum(np.asarray(bandwidths, dtype=float) * np.log2(1.0 + snr)))


def uplink_rate(owned, bandwidths, psd, gains_row, antenna_gain, noise_psd) -> float:
    """Sum rate (bit/s) of one device over the subchannels flagged in ``owned``.

    ``psd`` is the per-subchannel transmit PSD (W/Hz), ``gains_row`` the
    device's gain on every subchannel.
    """
    owned = np.asarray(owned, dtype=bool)
    psd = np.asarray(psd, dtype=float)
    if np.any(psd < 0):
        raise ValueError("negative PSD")
    if not owned.any():
        return 0.0
    return _link_rate(np.asarray(bandwidths)[owned], psd[owned], np.asarray(gains_row)[owned],
                      antenna_gain, noise_psd)


def downlink_rate(owned, bandwidths, p_dl, gains_row, antenna_gain, noise_psd) -> float:
    if p_dl < 0:
        raise ValueError("negative PSD")
    owned = np.asarray(owned, dtype=bool)
    if not owned.any():
        return 0.0
    b = np.asarray(bandwidths, dtype=float)[owned]
    return _link_rate(b, np.full(b.shape, float(p_dl)), np.asarray(gains_row)[owned],
                      antenna_gain, noise_psd)


def broadcast_rate(bandwidths, gains, p_dl, antenna_gain, noise_psd) -> float:
    """Shared downlink rate over all subchannels at the weakest gain."""
    gains = np.asarray(gains, dtype=float)
    if gains.size == 0:
        raise ValueError("need at least one device")
    weakest = float(gains.min())
    b = np.asarray(bandwidths, dtype=float)
    return float(np.sum(b * np.log2(1.0 + p_dl * antenna_gain * weakest / noise_psd)))


def psd_to_theta(psd, bandwidths, gains, antenna_gain, noise_psd):
    """Per-subchannel rate from PSD (the substitution theta = B log2(1 + SNR))."""
    snr = np.asarray(psd, dtype=float) * antenna_gain * np.asarray(gains, dtype=float) / noise_psd
    return np.asarray(bandwidths, dtype=float) * np.log1p(snr) / math.log(2.0)


def theta_to_psd(theta, bandwidths, gains, antenna_gain, noise_psd):
    b = np.asarray(bandwidths, dtype=float)
    with np.errstate(over="ignore"):
        return noise_psd * np.expm1(np.asarray(theta, dtype=float) / b * math.log(2.0)) / (
            antenna_gain * np.asarray(gains, dtype=float))
