"""Scenario description and the ``key = value`` configuration format.

Every key is optional except ``n_devices`` and ``n_subchannels``; defaults
give the reference setting (5 devices, 20 x 10 MHz subchannels, b = 64,
f_s = 5e9 cycles/s, ...).  Keys ending in a unit suffix take a plain number in
that unit, or a number followed by the same unit (``10 MHz``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .channel import ChannelModel, DeviceProfile, SubchannelSpec, dbm_to_watt, sample_gains
from .errors import ProfileError, ScenarioError
from .latency import as_fraction
from .profile import ModelProfile, load_profile, resnet18_preset


@dataclass(frozen=True)
class ServerProfile:
    compute: float = 5e9
    intensity: float = 1 / 32
    p_dl: float = 1e-8  # W/Hz
    noise_psd: float = dbm_to_watt(-174.0)  # W/Hz


@dataclass(frozen=True)
class Hyper:
    batch_size: int = 64
    phi: Fraction = Fraction(1, 2)
    p_th: float = dbm_to_watt(36.99)
    epsilon: float = 1e-6
    max_iters: int = 50
    seed: int = 0
    dataset_size: int = 8000
    target_epochs: float = 1.0


@dataclass(frozen=True)
class Scenario:
    devices: tuple
    server: ServerProfile
    subchannels: tuple
    channel: ChannelModel
    profile: ModelProfile
    hyper: Hyper
    gains: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if len(self.subchannels) < len(self.devices):
            raise ScenarioError(
                f"{len(self.subchannels)} subchannels cannot serve {len(self.devices)} devices")
        if self.gains.shape != (len(self.devices), len(self.subchannels)):
            raise ValueError("gain table shape does not match devices x subchannels")
        set_ = object.__setattr__
        set_(self, "bandwidths", np.array([s.bandwidth for s in self.subchannels]))
        set_(self, "freqs", np.array([s.center_freq for s in self.subchannels]))
        set_(self, "compute", np.array([d.compute for d in self.devices]))
        set_(self, "intensity", np.array([d.intensity for d in self.devices]))
        set_(self, "p_max", np.array([d.p_max for d in self.devices]))
        set_(self, "data_counts", np.array([d.data_count for d in self.devices]))

    @property
    def n_devices(self):
        return len(self.devices)

    @property
    def n_subchannels(self):
        return len(self.subchannels)

    @property
    def seed(self):
        return self.hyper.seed

    def with_gains(self, gains):
        return replace(self, gains=gains)


# --- configuration -------------------------------------------------------------

# key -> (default, kind); kinds: int, float, frac, str
DEFAULTS = {
    "n_devices": (None, "int"),
    "n_subchannels": (None, "int"),
    "subchannel_bw_mhz": (10.0, "float"),
    "carrier_start_ghz": (28.0, "float"),
    "batch_size": (64, "int"),
    "phi": (Fraction(1, 2), "frac"),
    "server_compute_cycles_per_s": (5e9, "float"),
    "server_intensity": (1 / 32, "float"),
    "device_compute_min_cycles_per_s": (1e9, "float"),
    "device_compute_max_cycles_per_s": (1.6e9, "float"),
    "device_intensity": (1 / 16, "float"),
    "coverage_radius_m": (200.0, "float"),
    "min_distance_m": (1.0, "float"),
    "p_max_dbm": (31.76, "float"),
    "p_th_dbm": (36.99, "float"),
    "p_dl_dbm_per_hz": (-50.0, "float"),
    "noise_dbm_per_hz": (-174.0, "float"),
    "antenna_gain": (10.0, "float"),
    "ref_loss_db": (32.44, "float"),
    "exp_los": (2.1, "float"),
    "exp_nlos": (3.4, "float"),
    "shadow_std_los_db": (3.6, "float"),
    "shadow_std_nlos_db": (9.7, "float"),
    "p_los": (0.5, "float"),
    "shadowing": ("device", "str"),
    "profile": ("resnet18", "str"),
    "epsilon": (1e-6, "float"),
    "max_iters": (50, "int"),
    "seed": (0, "int"),
    "dataset_size": (8000, "int"),
    "target_epochs": (1.0, "float"),
    # toy split-training settings
    "eta_c": (1.5e-4, "float"),
    "eta_s": (1e-4, "float"),
    "pt_switch_epoch": (1, "int"),
    "toy_input_dim": (10, "int"),
    "toy_class_sep": (1.0, "float"),
    "toy_test_size": (1000, "int"),
}
REQUIRED = ("n_devices", "n_subchannels")

_SUFFIX_UNITS = {"_mhz": "mhz", "_ghz": "ghz", "_dbm_per_hz": "dbm/hz", "_dbm": "dbm",
                 "_m": "m", "_cycles_per_s": "cycles/s", "_db": "db"}

_POSITIVE = {"n_devices", "n_subchannels", "subchannel_bw_mhz", "carrier_start_ghz",
             "batch_size", "server_compute_cycles_per_s", "server_intensity",
             "device_compute_min_cycles_per_s", "device_compute_max_cycles_per_s",
             "device_intensity", "coverage_radius_m", "min_distance_m", "antenna_gain",
             "exp_los", "exp_nlos", "epsilon", "max_iters", "dataset_size", "target_epochs",
             "toy_input_dim", "toy_test_size"}
_NONNEG = {"shadow_std_los_db", "shadow_std_nlos_db", "seed", "eta_c", "eta_s",
           "pt_switch_epoch", "toy_class_sep"}


def _unit_of(key):
    for suffix, unit in sorted(_SUFFIX_UNITS.items(), key=lambda kv: -len(kv[0])):
        if key.endswith(suffix):
            return unit
    return None


def _parse_value(key, text, line):
    default, kind = DEFAULTS[key]
    tokens = text.split()
    if not tokens:
        raise ScenarioError(f"empty value for {key}", line)
    if kind == "str":
        return text.strip()
    if len(tokens) > 2:
        raise ScenarioError(f"cannot parse {key} = {text!r}", line)
    if len(tokens) == 2:
        unit = _unit_of(key)
        if unit is None or tokens[1].lower() != unit:
            raise ScenarioError(f"unit {tokens[1]!r} does not match key {key}", line)
    raw = tokens[0]
    try:
        frac = Fraction(raw)
    except (ValueError, ZeroDivisionError):
        raise ScenarioError(f"cannot parse {key} = {text!r}", line) from None
    if kind == "int":
        if frac.denominator != 1:
            raise ScenarioError(f"{key} must be an integer", line)
        return int(frac)
    if kind == "frac":
        return frac
    return float(frac)


def _validate(values, lines):
    for key, v in values.items():
        line = lines.get(key)
        if key in _POSITIVE and not v > 0:
            raise ScenarioError(f"{key} must be > 0", line)
        if key in _NONNEG and v < 0:
            raise ScenarioError(f"{key} must be >= 0", line)
    if not 0 <= values["phi"] <= 1:
        raise ScenarioError("phi must lie in [0, 1]", lines.get("phi"))
    if not 0 <= values["p_los"] <= 1:
        raise ScenarioError("p_los must lie in [0, 1]", lines.get("p_los"))
    if values["device_compute_min_cycles_per_s"] > values["device_compute_max_cycles_per_s"]:
        raise ScenarioError("device compute range is empty",
                            lines.get("device_compute_max_cycles_per_s"))
    if values["min_distance_m"] > values["coverage_radius_m"]:
        raise ScenarioError("min_distance_m exceeds coverage radius", lines.get("min_distance_m"))
    if values["shadowing"] not in ("device", "subchannel"):
        raise ScenarioError("shadowing must be 'device' or 'subchannel'", lines.get("shadowing"))
    if values["n_subchannels"] < values["n_devices"]:
        raise ScenarioError(
            f"n_subchannels = {values['n_subchannels']} < n_devices = {values['n_devices']}",
            lines.get("n_subchannels"))


def parse_config(text: str) -> dict:
    """Parse config text into a complete, validated key -> value dict."""
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in DEFAULTS:
            raise ScenarioError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ScenarioError(f"duplicate key {key!r}", lineno)
        values[key] = _parse_value(key, val, lineno)
        lines[key] = lineno
    for key in REQUIRED:
        if key not in values:
            raise ScenarioError(f"missing required key {key!r}")
    for key, (default, _) in DEFAULTS.items():
        values.setdefault(key, default)
    _validate(values, lines)
    values["_lines"] = lines
    return values


def default_config(**overrides) -> dict:
    text = "n_devices = 5\nn_subchannels = 20\n"
    cfg = parse_config(text)
    cfg.update(overrides)
    _validate(cfg, {})
    return cfg


def _load_model_profile(spec, line):
    if spec == "resnet18":
        return resnet18_preset()
    try:
        return load_profile(Path(spec))
    except OSError as exc:
        raise ScenarioError(f"cannot read profile {spec!r}: {exc}", line) from None
    except ProfileError as exc:
        raise ScenarioError(f"profile {spec!r}: {exc}", line) from None


def _seed_int(seed, stream):
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def build_scenario(config: dict, seed=None, profile=None) -> Scenario:
    """Instantiate devices, subchannels and gains from a config dict.

    Device positions, compute speeds and gains are drawn from ``seed`` (the
    config's seed when omitted); the same seed always yields the same scenario.
    """
    cfg = config
    seed = cfg["seed"] if seed is None else seed
    lines = cfg.get("_lines", {})
    if profile is None:
        profile = _load_model_profile(cfg["profile"], lines.get("profile"))
    C, M = cfg["n_devices"], cfg["n_subchannels"]
    if M < C:
        raise ScenarioError(f"n_subchannels = {M} < n_devices = {C}", lines.get("n_subchannels"))

    rng = np.random.default_rng([seed, 0])
    radius = cfg["coverage_radius_m"] * np.sqrt(rng.random(C))
    dist = np.maximum(radius, cfg["min_distance_m"])
    compute = rng.uniform(cfg["device_compute_min_cycles_per_s"],
                          cfg["device_compute_max_cycles_per_s"], C)
    per, extra = divmod(cfg["dataset_size"], C)
    p_max = dbm_to_watt(cfg["p_max_dbm"])
    devices = tuple(
        DeviceProfile(i, float(compute[i]), cfg["device_intensity"], float(dist[i]), p_max,
                      max(1, per + (1 if i < extra else 0)))
        for i in range(C))

    bw = cfg["subchannel_bw_mhz"] * 1e6
    f0 = cfg["carrier_start_ghz"] * 1e9
    subchannels = tuple(SubchannelSpec(k, f0 + (k + 0.5) * bw, bw) for k in range(M))

    channel = ChannelModel(
        ref_loss_db=cfg["ref_loss_db"], exp_los=cfg["exp_los"], exp_nlos=cfg["exp_nlos"],
        shadow_std_los_db=cfg["shadow_std_los_db"], shadow_std_nlos_db=cfg["shadow_std_nlos_db"],
        p_los=cfg["p_los"], seed=_seed_int(seed, 1), antenna_gain=cfg["antenna_gain"],
        shadowing_per_subchannel=cfg["shadowing"] == "subchannel")
    server = ServerProfile(cfg["server_compute_cycles_per_s"], cfg["server_intensity"],
                           dbm_to_watt(cfg["p_dl_dbm_per_hz"]), dbm_to_watt(cfg["noise_dbm_per_hz"]))
    hyper = Hyper(cfg["batch_size"], as_fraction(cfg["phi"]), dbm_to_watt(cfg["p_th_dbm"]),
                  cfg["epsilon"], cfg["max_iters"], seed, cfg["dataset_size"],
                  cfg["target_epochs"])
    gains = sample_gains(channel, devices, subchannels)
    return Scenario(devices, server, subchannels, channel, profile, hyper, gains)


def parse_scenario(source) -> Scenario:
    """Parse a config file (path or text) and build the scenario it describes."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and "=" not in source):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ScenarioError(f"cannot read config: {exc}") from None
    else:
        text = source
    return build_scenario(parse_config(text))


def redraw_gains(scenario: Scenario, round_index: int) -> Scenario:
    """Same devices and subchannels with an independent gain realisation."""
    seed = _seed_int(scenario.channel.seed, 100 + round_index)
    return scenario.with_gains(sample_gains(scenario.channel, scenario.devices,
                                            scenario.subchannels, seed=seed))

