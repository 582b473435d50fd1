"""Joint subchannel / power / cut-layer optimisation of the round latency.

The round latency is minimised by block-coordinate descent over four blocks:

* subchannel ownership, by a straggler-first greedy pass;
* per-subchannel rates theta (equivalently PSD), by bisection on the uplink
  stage bound with inverse water-filling per device;
* the cut layer, by enumerating every admissible cut;
* the two stage bounds t1, t2, in closed form.

A block update is kept only if it does not increase the objective, so the
objective trace is monotone.  All ties go to the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import psd_to_theta, theta_to_psd
from .errors import InfeasibleError
from .latency import (Allocation, LatencyBreakdown, device_times, objective, round_latency,
                      server_times)
from .profile import workloads_at_cut

LN2 = math.log(2.0)


@dataclass
class RateVars:
    """Per-subchannel rate theta_k (bit/s) carried to the subchannel's owner."""

    owner: np.ndarray
    theta: np.ndarray

    def per_device(self, i):
        return self.theta[self.owner == i]

    def totals(self, n_devices):
        active = self.owner >= 0
        return np.bincount(self.owner[active], weights=self.theta[active], minlength=n_devices)


@dataclass
class BcdResult:
    allocation: Allocation
    rates: RateVars
    breakdown: LatencyBreakdown
    trace: list
    t1: float
    t2: float
    iterations: int
    converged: bool
    accepted: dict = field(default_factory=dict)

    @property
    def objective(self):
        return self.trace[-1]


# --- helpers -------------------------------------------------------------------

def owner_gains(scenario, owner):
    owner = np.asarray(owner)
    g = np.ones(owner.shape)
    active = owner >= 0
    g[active] = scenario.gains[owner[active], np.nonzero(active)[0]]
    return g


def rates_from_psd(scenario, owner, psd):
    theta = psd_to_theta(psd, scenario.bandwidths, owner_gains(scenario, owner),
                         scenario.channel.antenna_gain, scenario.server.noise_psd)
    theta = np.where(np.asarray(owner) >= 0, theta, 0.0)
    return RateVars(np.asarray(owner).copy(), theta)


def psd_from_rates(scenario, rates: RateVars):
    psd = theta_to_psd(rates.theta, scenario.bandwidths, owner_gains(scenario, rates.owner),
                       scenario.channel.antenna_gain, scenario.server.noise_psd)
    return np.where(rates.owner >= 0, psd, 0.0)


def device_powers(scenario, owner, psd):
    owner = np.asarray(owner)
    active = owner >= 0
    p = np.asarray(psd) * scenario.bandwidths
    return np.bincount(owner[active], weights=p[active], minlength=scenario.n_devices)


def uniform_psd(scenario, owner):
    """Equal PSD p_th / sum(B) everywhere, scaled down per device to respect p_max."""
    owner = np.asarray(owner)
    base = scenario.hyper.p_th / scenario.bandwidths.sum()
    psd = np.where(owner >= 0, base, 0.0)
    for i in range(scenario.n_devices):
        mine = owner == i
        width = scenario.bandwidths[mine].sum()
        if width > 0 and base * width > scenario.p_max[i]:
            psd[mine] = scenario.p_max[i] / width
    return psd


def constraint_violations(scenario, alloc: Allocation, rtol=1e-9):
    """Human-readable list of violated constraints (empty when feasible)."""
    out = []
    owner = alloc.owner
    if owner.shape != (scenario.n_subchannels,):
        out.append("owner vector has wrong length")
        return out
    if np.any((owner < -1) | (owner >= scenario.n_devices)):
        out.append("subchannel owned by unknown device")
    if np.any(alloc.psd < 0):
        out.append("negative PSD")
    if np.any(alloc.psd[owner < 0] != 0):
        out.append("idle subchannel with nonzero PSD")
    if not 1 <= alloc.cut <= scenario.profile.total_layers - 1:
        out.append(f"cut {alloc.cut} out of range")
    p = device_powers(scenario, owner, alloc.psd)
    for i in np.nonzero(p > scenario.p_max * (1 + rtol))[0]:
        out.append(f"device {i} power {p[i]:.6g} W exceeds p_max")
    if p.sum() > scenario.hyper.p_th * (1 + rtol):
        out.append(f"total power {p.sum():.6g} W exceeds p_th")
    return out


# --- subchannel allocation -----------------------------------------------------

def _subchannel_order(scenario):
    ratio = scenario.freqs / scenario.bandwidths
    return list(np.lexsort((np.arange(scenario.n_subchannels), ratio)))


def greedy_subchannel_alloc(scenario, psd, cut, phi=None):
    """Straggler-first greedy ownership vector (-1 = left unassigned).

    Phase 1 gives every device, slowest CPU first, the free subchannel with
    the smallest F/B.  Phase 2 hands each remaining subchannel to the worse of
    the uplink and downlink stragglers unless that breaks the device's power
    cap under ``psd``, in which case the device is frozen out.
    """
    C, M = scenario.n_devices, scenario.n_subchannels
    if M < C:
        raise InfeasibleError(f"{M} subchannels cannot serve {C} devices")
    psd = np.asarray(psd, dtype=float)
    owner = np.full(M, -1)
    free = _subchannel_order(scenario)
    for n in sorted(range(C), key=lambda i: (scenario.compute[i], i)):
        owner[free.pop(0)] = n

    candidates = set(range(C))
    width_power = psd * scenario.bandwidths
    while free and candidates:
        t_fp, t_up, t_dn, t_bp = device_times(scenario, owner, psd, cut, phi)
        up, down = t_fp + t_up, t_dn + t_bp
        cand = sorted(candidates)
        n1 = max(cand, key=lambda i: (up[i], -i))
        n2 = max(cand, key=lambda i: (down[i], -i))
        total = up + down
        n = max(sorted({n1, n2}), key=lambda i: (total[i], -i))
        m = free[0]
        owner[m] = n
        if width_power[owner == n].sum() > scenario.p_max[n]:
            owner[m] = -1
            candidates.discard(n)
        else:
            free.pop(0)
    return owner


def rss_subchannel_alloc(scenario):
    """Each subchannel to the device with the strongest received signal.

    Devices left without any subchannel then take, in id order, their
    strongest subchannel among those whose owner holds more than one.
    """
    gains = scenario.gains
    owner = np.argmax(gains, axis=0)
    for i in range(scenario.n_devices):
        if np.any(owner == i):
            continue
        counts = np.bincount(owner, minlength=scenario.n_devices)
        spare = np.nonzero(counts[owner] > 1)[0]
        if spare.size == 0:
            raise InfeasibleError("not enough subchannels to cover every device")
        k = spare[np.argmax(gains[i, spare])]
        owner[k] = i
    return owner


# --- power control ---------------------------------------------------------------

def min_power_for_rate(rate, bandwidths, gains, antenna_gain, noise_psd):
    """Cheapest split of ``rate`` over parallel subchannels (inverse water-filling).

    Returns ``(theta, power)``.  The active set and the common water level are
    found exactly: theta_k = B_k * max(0, log2(nu * g_k)), g_k = G gamma_k / sigma^2.
    """
    b = np.asarray(bandwidths, dtype=float)
    g = np.asarray(gains, dtype=float) * antenna_gain / noise_psd
    if b.size == 0:
        if rate > 0:
            raise InfeasibleError("positive rate requested over no subchannels")
        return np.zeros(0), 0.0
    if rate < 0:
        raise ValueError("rate must be >= 0")
    if rate == 0:
        return np.zeros(b.shape), 0.0
    log_g = np.log2(g)
    order = np.lexsort((np.arange(b.size), -g))
    theta = np.zeros(b.shape)
    for n in range(1, b.size + 1):
        act = order[:n]
        log_nu = (rate - np.sum(b[act] * log_g[act])) / b[act].sum()
        if log_nu + log_g[order[n - 1]] < 0:
            continue
        if n < b.size and log_nu + log_g[order[n]] > 0:
            continue
        theta[act] = np.maximum(b[act] * (log_nu + log_g[act]), 0.0)
        break
    with np.errstate(over="ignore"):
        power = float(np.sum(b * np.expm1(theta / b * LN2) / g))
    return theta, power


@dataclass
class PowerSolution:
    rates: RateVars
    t1: float
    powers: np.ndarray


def solve_power_control(scenario, owner, cut, tol=1e-9):
    """Minimise max_i(T_i^F + b psi / sum theta_i) under per-device and total power caps.

    Bisection on the stage bound t: device i needs rate b psi / (t - T_i^F),
    bought at minimum power by water-filling; t is feasible when every device
    stays under p_max and the sum under p_th.
    """
    owner = np.asarray(owner)
    C = scenario.n_devices
    b = scenario.hyper.batch_size
    w = workloads_at_cut(scenario.profile, cut)
    bits = b * w.smashed_bits
    t_fp = b * scenario.intensity * w.client_fp / scenario.compute
    groups = [np.nonzero(owner == i)[0] for i in range(C)]
    for i, idx in enumerate(groups):
        if idx.size == 0:
            raise InfeasibleError(f"device {i} owns no subchannel")
    G, noise = scenario.channel.antenna_gain, scenario.server.noise_psd

    def solve_at(t):
        theta = np.zeros(owner.shape)
        powers = np.empty(C)
        for i, idx in enumerate(groups):
            th, p = min_power_for_rate(bits / (t - t_fp[i]), scenario.bandwidths[idx],
                                       scenario.gains[i, idx], G, noise)
            theta[idx] = th
            powers[i] = p
        ok = bool(np.all(powers <= scenario.p_max) and powers.sum() <= scenario.hyper.p_th)
        return ok, theta, powers

    lo = float(t_fp.max())
    gap = max(lo, 1e-3)
    hi = lo + gap
    ok, theta, powers = solve_at(hi)
    while not ok:
        gap *= 2.0
        hi = lo + gap
        if not math.isfinite(hi):
            raise InfeasibleError("no uplink bound satisfies the power caps")
        ok, theta, powers = solve_at(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        ok, th, pw = solve_at(mid)
        if ok:
            hi, theta, powers = mid, th, pw
        else:
            lo = mid
    rates = RateVars(owner.copy(), theta)
    return PowerSolution(rates, hi, powers)


# --- cut layer and stage bounds ----------------------------------------------------

def _stage_bounds(scenario, owner, uplink_totals, cut, phi):
    t_fp, t_up, t_dn, t_bp = device_times(scenario, owner, None, cut, phi, uplink=uplink_totals)
    return t_fp + t_up, t_dn + t_bp


def update_aux(scenario, owner, rates: RateVars, cut, phi=None):
    """Closed-form stage bounds t1*, t2* for fixed rates and cut."""
    up, down = _stage_bounds(scenario, owner, rates.totals(scenario.n_devices), cut, phi)
    return float(up.max()), float(down.max())


@dataclass(frozen=True)
class CutChoice:
    cut: int
    feasible: bool
    objective: float


def cut_objectives(scenario, cut, t1, t2, phi=None):
    t_sf, t_sb, t_bc = server_times(scenario, cut, phi)
    return t1 + t_sf + t_sb + t_bc + t2


def solve_cut_layer(scenario, owner, rates: RateVars, t1, t2, phi=None, rtol=1e-12):
    """Enumerate every admissible cut under fixed rates and stage bounds.

    Among cuts whose client stages fit inside t1 and t2, pick the one with the
    smallest t1 + server stages + t2 (smaller index on ties).  If none fits,
    return the cut with the smallest worst violation, flagged infeasible.
    """
    totals = rates.totals(scenario.n_devices)
    best = None
    fallback = None
    for j in scenario.profile.cut_range:
        up, down = _stage_bounds(scenario, owner, totals, j, phi)
        viol = max(up.max() - t1 * (1 + rtol), down.max() - t2 * (1 + rtol), 0.0)
        obj = cut_objectives(scenario, j, t1, t2, phi)
        if viol == 0.0:
            if best is None or obj < best.objective:
                best = CutChoice(j, True, obj)
        elif fallback is None or viol < fallback[0]:
            fallback = (viol, CutChoice(j, False, obj))
    return best if best is not None else fallback[1]


# --- BCD ---------------------------------------------------------------------------

BLOCKS_ALL = ("r", "theta", "mu")


def _random_cut(scenario):
    rng = np.random.default_rng([scenario.seed, 2])
    return int(rng.integers(1, scenario.profile.total_layers))


def _initial(scenario, phi, subchannels, cut):
    """Starting point: uniform PSD and the best cut for the starting ownership."""
    base = np.full(scenario.n_subchannels, scenario.hyper.p_th / scenario.bandwidths.sum())
    cuts = scenario.profile.cut_range if cut is None else [cut]
    best = None
    for j in cuts:
        owner = (greedy_subchannel_alloc(scenario, base, j, phi) if subchannels == "greedy"
                 else rss_subchannel_alloc(scenario))
        psd = uniform_psd(scenario, owner)
        obj = objective(scenario, owner, psd, j, phi)
        if best is None or obj < best[0]:
            best = (obj, Allocation(owner, psd, j))
    return best[1]


def bcd_optimize(scenario, phi=None, epsilon=None, max_iters=None, *, blocks=BLOCKS_ALL,
                 subchannels="greedy", power="optimized", cut=None, check=True):
    """Block-coordinate descent on the round latency.

    ``blocks`` selects which of "r", "theta", "mu" are updated; the others stay
    at their initial values (used by the baselines).  ``power="uniform"`` keeps
    the equal-PSD rule whenever ownership changes.  ``cut`` pins the initial cut.
    """
    phi = scenario.hyper.phi if phi is None else phi
    epsilon = scenario.hyper.epsilon if epsilon is None else epsilon
    max_iters = scenario.hyper.max_iters if max_iters is None else max_iters
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")

    alloc = _initial(scenario, phi, subchannels, cut)
    cur = objective(scenario, alloc.owner, alloc.psd, alloc.cut, phi)
    if not math.isfinite(cur):
        raise InfeasibleError("initial allocation leaves a device unreachable")
    trace = [cur]
    accepted = {b: 0 for b in blocks}
    converged = False
    it = 0

    def consider(candidate, block):
        nonlocal alloc, cur
        if check and constraint_violations(scenario, candidate):
            return
        obj = objective(scenario, candidate.owner, candidate.psd, candidate.cut, phi)
        if obj <= cur:
            alloc, cur = candidate, obj
            accepted[block] += 1

    for it in range(1, max_iters + 1):
        prev = cur
        if "r" in blocks:
            owner = greedy_subchannel_alloc(scenario, alloc.psd, alloc.cut, phi)
            psd = (uniform_psd(scenario, owner) if power == "uniform"
                   else np.where(owner >= 0, alloc.psd, 0.0))
            consider(Allocation(owner, psd, alloc.cut), "r")
        if "theta" in blocks:
            sol = solve_power_control(scenario, alloc.owner, alloc.cut)
            consider(Allocation(alloc.owner, psd_from_rates(scenario, sol.rates), alloc.cut),
                     "theta")
        if "mu" in blocks:
            rates = rates_from_psd(scenario, alloc.owner, alloc.psd)
            t1, t2 = update_aux(scenario, alloc.owner, rates, alloc.cut, phi)
            choice = solve_cut_layer(scenario, alloc.owner, rates, t1, t2, phi)
            if choice.cut != alloc.cut:
                consider(Allocation(alloc.owner, alloc.psd, choice.cut), "mu")
        trace.append(cur)
        assert trace[-1] <= trace[-2], "objective increased"
        if abs(prev - cur) <= epsilon:
            converged = True
            break

    rates = rates_from_psd(scenario, alloc.owner, alloc.psd)
    t1, t2 = update_aux(scenario, alloc.owner, rates, alloc.cut, phi)
    breakdown = round_latency(scenario, alloc, phi)
    return BcdResult(alloc, rates, breakdown, trace, t1, t2, it, converged, accepted)


# --- baselines -------------------------------------------------------------------

BASELINES = ("a", "b", "c", "d")


def baseline_alloc(kind, scenario, phi=None):
    """Reference strategies.

    a: RSS subchannels, uniform PSD, random cut
    b: greedy subchannels, optimised PSD, random cut
    c: RSS subchannels, optimised PSD, optimised cut
    d: greedy subchannels, uniform PSD, optimised cut
    """
    phi = scenario.hyper.phi if phi is None else phi
    if kind == "a":
        owner = rss_subchannel_alloc(scenario)
        alloc = Allocation(owner, uniform_psd(scenario, owner), _random_cut(scenario))
        return alloc, round_latency(scenario, alloc, phi)
    if kind == "b":
        res = bcd_optimize(scenario, phi, blocks=("r", "theta"), cut=_random_cut(scenario))
    elif kind == "c":
        res = bcd_optimize(scenario, phi, blocks=("theta", "mu"), subchannels="rss")
    elif kind == "d":
        res = bcd_optimize(scenario, phi, blocks=("r", "mu"), power="uniform")
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return res.allocation, res.breakdown

