import math

import numpy as np
import pytest

from stcl.geo import GeoPoint, ImageRecord


def make_record(rid, lat, lon, heading=0.0, year=2020, month=1, area=None):
    return ImageRecord(rid, GeoPoint(lat, lon), heading, year, month, "test", area)


def offset(lat, lon, north_m, east_m):
    """Point displaced by small metric offsets (flat-earth approximation)."""
    dlat = north_m / 6_371_000.0 * 180.0 / math.pi
    dlon = east_m / (6_371_000.0 * math.cos(math.radians(lat))) * 180.0 / math.pi
    return lat + dlat, lon + dlon


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
