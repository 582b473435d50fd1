"""Latency model, resource optimiser and toy trainer for efficient parallel split learning."""

from .errors import EpslError, InfeasibleError, ProfileError, ScenarioError, UnreachableDeviceError
from .latency import Allocation, LatencyBreakdown, framework_round_latency, round_latency
from .optimizer import baseline_alloc, bcd_optimize
from .profile import ModelProfile, load_profile, parse_profile, resnet18_preset
from .scenario import Scenario, build_scenario, default_config, parse_scenario

__all__ = [
    "Allocation", "EpslError", "InfeasibleError", "LatencyBreakdown", "ModelProfile",
    "ProfileError", "Scenario", "ScenarioError", "UnreachableDeviceError", "baseline_alloc",
    "bcd_optimize", "build_scenario", "default_config", "framework_round_latency",
    "load_profile", "parse_profile", "parse_scenario", "resnet18_preset", "round_latency",
]
