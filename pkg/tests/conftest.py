import numpy as np
import pytest

from epsl.scenario import build_scenario, default_config


@pytest.fixture(scope="session")
def default_scenario():
    """Default 5-device, 20-subchannel scenario with the ResNet-18 profile."""
    return build_scenario(default_config(), seed=0)


def spread_owner(n_devices, n_subchannels):
    return np.arange(n_subchannels) % n_devices


def custom_scenario(computes, gains, freqs=None, bandwidths=None, p_max=1.5, p_th=5.0,
                    profile=None, batch=64, phi=None, distance=50.0):
    """Scenario with hand-set device speeds and gain table."""
    from fractions import Fraction

    from epsl.channel import DeviceProfile, SubchannelSpec
    from epsl.scenario import Scenario, ServerProfile, Hyper
    from epsl.channel import ChannelModel
    from epsl.profile import resnet18_preset

    gains = np.asarray(gains, dtype=float)
    C, M = gains.shape
    freqs = np.full(M, 28e9) if freqs is None else freqs
    bandwidths = np.full(M, 10e6) if bandwidths is None else bandwidths
    devices = tuple(DeviceProfile(i, float(computes[i]), 1 / 16, distance, p_max, 100)
                    for i in range(C))
    subs = tuple(SubchannelSpec(k, float(freqs[k]), float(bandwidths[k])) for k in range(M))
    hyper = Hyper(batch_size=batch, p_th=p_th,
                  phi=Fraction(1, 2) if phi is None else Fraction(phi))
    return Scenario(devices, ServerProfile(), subs, ChannelModel(),
                    profile or resnet18_preset(), hyper, gains)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
