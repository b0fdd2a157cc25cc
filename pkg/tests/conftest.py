import sys

import pytest

from teepay.demo import ChannelConfig, make_fixture
from teepay.host import establish

_config = None


def pytest_configure(config):
    global _config
    _config = config


def pytest_runtest_logreport(report):
    """One pass/fail line per acceptance criterion, live on the terminal."""
    if report.when != "call" or _config is None:
        return
    _terminal = _config.pluginmanager.get_plugin("terminalreporter")
    module = sys.modules.get("test_acceptance")
    if _terminal is None or module is None:
        return
    info = getattr(module, "CRITERIA", {}).get(report.nodeid.rsplit("::", 1)[-1])
    if info:
        num, label = info
        _terminal.write_line(f"criterion {num} ({label}): "
                             f"{'PASS' if report.passed else 'FAIL'}")


@pytest.fixture
def default_config():
    return ChannelConfig(seed=11)


@pytest.fixture
def open_channel(default_config):
    """An established channel over the in-process link."""
    fx = make_fixture(default_config)
    establish(fx.node_hash, fx.node_broadcast, fx.link)
    return fx


@pytest.fixture
def zero_fee_config():
    return ChannelConfig(seed=11, fee_setup=0, fee_close=0)
