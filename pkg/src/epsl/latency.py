"""Seven-stage latency of one EPSL training round.

Stages: client FP, smashed-data uplink, server FP, server BP, broadcast of the
aggregated cut gradients, unicast of the unaggregated cut gradients, client
BP.  The round total is

    max_i(T_i^F + T_i^U) + T_s^F + T_s^B + T^B + max_i(T_i^D + T_i^B)

Aggregation time, loss computation and label upload are treated as free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import UnreachableDeviceError
from .profile import workloads_at_cut


def as_fraction(phi) -> Fraction:
    """Exact rational aggregation ratio; floats are read by their shortest repr."""
    if isinstance(phi, Fraction):
        frac = phi
    elif isinstance(phi, float):
        frac = Fraction(repr(phi))
    else:
        frac = Fraction(phi)
    if not 0 <= frac <= 1:
        raise ValueError(f"aggregation ratio {phi} outside [0, 1]")
    return frac


def aggregated_count(phi, batch: int) -> int:
    """ceil(phi * b), computed exactly."""
    return math.ceil(as_fraction(phi) * batch)


@dataclass
class Allocation:
    """Decision triple: subchannel owners, per-subchannel PSD (W/Hz), cut layer.

    ``owner[k] == -1`` marks a subchannel nobody could take without breaking a
    power cap; its PSD is zero.
    """

    owner: np.ndarray
    psd: np.ndarray
    cut: int

    def __post_init__(self):
        self.owner = np.asarray(self.owner, dtype=int)
        self.psd = np.asarray(self.psd, dtype=float)
        if self.owner.shape != self.psd.shape:
            raise ValueError("owner and psd must have one entry per subchannel")

    def owned(self, device):
        return self.owner == device

    def copy(self):
        return Allocation(self.owner.copy(), self.psd.copy(), self.cut)


@dataclass(frozen=True)
class LatencyBreakdown:
    t_client_fp: np.ndarray
    t_uplink: np.ndarray
    t_server_fp: float
    t_server_bp: float
    t_broadcast: float
    t_downlink: np.ndarray
    t_client_bp: np.ndarray
    total: float = field(default=float("nan"))

    @staticmethod
    def compose(t_client_fp, t_uplink, t_server_fp, t_server_bp, t_broadcast, t_downlink,
                t_client_bp):
        return float(np.max(t_client_fp + t_uplink) + t_server_fp + t_server_bp + t_broadcast
                     + np.max(t_downlink + t_client_bp))

    def recompose(self):
        return self.compose(self.t_client_fp, self.t_uplink, self.t_server_fp, self.t_server_bp,
                            self.t_broadcast, self.t_downlink, self.t_client_bp)

    @property
    def t1(self):
        return float(np.max(self.t_client_fp + self.t_uplink))

    @property
    def t2(self):
        return float(np.max(self.t_downlink + self.t_client_bp))


# --- stage formulas ------------------------------------------------------------

def _check_batch(batch):
    if batch < 1:
        raise ValueError("batch size must be >= 1")


def client_fp_latency(device, profile, cut, batch):
    _check_batch(batch)
    w = workloads_at_cut(profile, cut)
    return batch * device.intensity * w.client_fp / device.compute


def client_bp_latency(device, profile, cut, batch):
    _check_batch(batch)
    w = workloads_at_cut(profile, cut)
    return batch * device.intensity * w.client_bp / device.compute


def smashed_tx_latency(rate, profile, cut, batch, device=None):
    _check_batch(batch)
    if rate <= 0:
        raise UnreachableDeviceError(f"device {device} has zero uplink rate")
    return batch * workloads_at_cut(profile, cut).smashed_bits / rate


def server_fp_latency(n_clients, batch, intensity, compute, workload):
    return n_clients * batch * intensity * workload / compute


def server_bp_coefficient(n_clients, batch, phi):
    """Number of per-sample BP passes below the last layer."""
    agg = aggregated_count(phi, batch)
    return agg + n_clients * (batch - agg)


def server_bp_latency(n_clients, batch, phi, intensity, compute, workload, last_workload):
    coef = server_bp_coefficient(n_clients, batch, phi)
    return (coef * intensity * workload + n_clients * batch * intensity * last_workload) / compute


def broadcast_latency(phi, batch, grad_bits, rate):
    agg = aggregated_count(phi, batch)
    if agg == 0:
        return 0.0
    if rate <= 0:
        raise UnreachableDeviceError("zero broadcast rate")
    return agg * grad_bits / rate


def unagg_tx_latency(phi, batch, grad_bits, rate, device=None):
    rest = batch - aggregated_count(phi, batch)
    if rest == 0:
        return 0.0
    if rate <= 0:
        raise UnreachableDeviceError(f"device {device} has zero downlink rate")
    return rest * grad_bits / rate


# --- vectorised helpers over a whole allocation --------------------------------

def subchannel_rates(scenario, owner, psd):
    """Per-subchannel uplink rate to its owner (0 on idle subchannels)."""
    owner = np.asarray(owner)
    active = owner >= 0
    g = np.zeros(owner.shape)
    g[active] = scenario.gains[owner[active], np.nonzero(active)[0]]
    snr = np.asarray(psd, dtype=float) * scenario.channel.antenna_gain * g / scenario.server.noise_psd
    return scenario.bandwidths * np.log2(1.0 + snr)


def uplink_rates(scenario, owner, psd):
    owner = np.asarray(owner)
    active = owner >= 0
    r = subchannel_rates(scenario, owner, psd)
    return np.bincount(owner[active], weights=r[active], minlength=scenario.n_devices)


def downlink_rates(scenario, owner):
    owner = np.asarray(owner)
    return uplink_rates(scenario, owner, np.where(owner >= 0, scenario.server.p_dl, 0.0))


def broadcast_rate_of(scenario):
    from .channel import broadcast_rate
    return broadcast_rate(scenario.bandwidths, scenario.gains, scenario.server.p_dl,
                          scenario.channel.antenna_gain, scenario.server.noise_psd)


def _safe_div(num, den):
    num = np.broadcast_to(np.asarray(num, dtype=float), np.shape(den))
    out = np.full(np.shape(den), np.inf)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    out[(num == 0)] = 0.0
    return out


def device_times(scenario, owner, psd, cut, phi=None, uplink=None):
    """Per-device (T^F, T^U, T^D, T^B) arrays; zero rates give inf, never raise.

    ``uplink`` overrides the uplink rates (e.g. rates given directly as theta sums).
    """
    phi = scenario.hyper.phi if phi is None else phi
    b = scenario.hyper.batch_size
    w = workloads_at_cut(scenario.profile, cut)
    scale = b * scenario.intensity / scenario.compute
    t_fp = scale * w.client_fp
    t_bp = scale * w.client_bp
    r_up = uplink_rates(scenario, owner, psd) if uplink is None else np.asarray(uplink, float)
    t_up = _safe_div(b * w.smashed_bits, r_up)
    rest = b - aggregated_count(phi, b)
    t_dn = _safe_div(rest * w.grad_bits, downlink_rates(scenario, owner))
    return t_fp, t_up, t_dn, t_bp


def server_times(scenario, cut, phi=None, n_clients=None):
    """(T_s^F, T_s^B, T^B) for the given cut."""
    phi = scenario.hyper.phi if phi is None else phi
    b = scenario.hyper.batch_size
    c = scenario.n_devices if n_clients is None else n_clients
    w = workloads_at_cut(scenario.profile, cut)
    srv = scenario.server
    t_sf = server_fp_latency(c, b, srv.intensity, srv.compute, w.server_fp)
    t_sb = server_bp_latency(c, b, phi, srv.intensity, srv.compute, w.server_bp, w.server_last_bp)
    t_bc = broadcast_latency(phi, b, w.grad_bits, broadcast_rate_of(scenario))
    return t_sf, t_sb, t_bc


def objective(scenario, owner, psd, cut, phi=None):
    """Round total, +inf when some device is unreachable."""
    t_fp, t_up, t_dn, t_bp = device_times(scenario, owner, psd, cut, phi)
    t_sf, t_sb, t_bc = server_times(scenario, cut, phi)
    return LatencyBreakdown.compose(t_fp, t_up, t_sf, t_sb, t_bc, t_dn, t_bp)


def round_latency(scenario, allocation: Allocation, phi=None) -> LatencyBreakdown:
    """Full per-stage breakdown; raises UnreachableDeviceError on a dead link."""
    phi = scenario.hyper.phi if phi is None else phi
    b = scenario.hyper.batch_size
    cut = allocation.cut
    prof = scenario.profile
    r_up = uplink_rates(scenario, allocation.owner, allocation.psd)
    r_dn = downlink_rates(scenario, allocation.owner)
    n = scenario.n_devices
    t_fp = np.empty(n)
    t_up = np.empty(n)
    t_dn = np.empty(n)
    t_bp = np.empty(n)
    w = workloads_at_cut(prof, cut)
    for i, dev in enumerate(scenario.devices):
        t_fp[i] = client_fp_latency(dev, prof, cut, b)
        t_up[i] = smashed_tx_latency(r_up[i], prof, cut, b, device=i)
        t_dn[i] = unagg_tx_latency(phi, b, w.grad_bits, r_dn[i], device=i)
        t_bp[i] = client_bp_latency(dev, prof, cut, b)
    t_sf, t_sb, t_bc = server_times(scenario, cut, phi)
    parts = (t_fp, t_up, t_sf, t_sb, t_bc, t_dn, t_bp)
    return LatencyBreakdown(*parts, total=LatencyBreakdown.compose(*parts))


# --- framework-level round latencies ------------------------------------------

FRAMEWORKS = ("vanilla_sl", "sfl", "psl", "epsl", "epsl_pt")


def framework_round_latency(scenario, allocation, framework, phi=None) -> float:
    """Modelled latency of one round of ``framework`` at a fixed allocation.

    sfl adds the client-model upload (slowest device) and the broadcast of the
    averaged client model.  vanilla_sl runs the devices one after another, each
    with a single-client server pass, and hands the client model to the next
    device through the server.  epsl_pt uses whatever ``phi`` the caller's
    current phase prescribes.
    """
    if framework == "psl":
        return round_latency(scenario, allocation, 0).total
    if framework in ("epsl", "epsl_pt"):
        return round_latency(scenario, allocation, phi).total
    w = workloads_at_cut(scenario.profile, allocation.cut)
    r_up = uplink_rates(scenario, allocation.owner, allocation.psd)
    r_dn = downlink_rates(scenario, allocation.owner)
    if np.any(r_up <= 0) or np.any(r_dn <= 0):
        raise UnreachableDeviceError("device without uplink/downlink rate")
    model_bits = w.client_param_bits
    if framework == "sfl":
        base = round_latency(scenario, allocation, 0).total
        return base + float(np.max(model_bits / r_up)) + model_bits / broadcast_rate_of(scenario)
    if framework == "vanilla_sl":
        t_fp, t_up, t_dn, t_bp = device_times(scenario, allocation.owner, allocation.psd,
                                              allocation.cut, 0)
        t_sf, t_sb, _ = server_times(scenario, allocation.cut, 0, n_clients=1)
        nxt = np.roll(np.arange(scenario.n_devices), -1)
        handoff = model_bits / r_up + model_bits / r_dn[nxt]
        return float(np.sum(t_fp + t_up + t_sf + t_sb + t_dn + t_bp + handoff))
    raise ValueError(f"unknown framework {framework!r}")


def rounds_per_epoch(data_count, batch):
    return math.ceil(data_count / batch)


def latency_to_target(per_round, data_count, batch, epochs):
    """Total modelled time for ``epochs`` passes over each device's local data."""
    return epochs * rounds_per_epoch(data_count, batch) * per_round
