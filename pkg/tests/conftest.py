import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


from dynct.geometry import (  # noqa: E402
    Box,
    CircleTrajectory,
    ConstantAttenuation,
    PulseAttenuation,
    RadialPulseDeformation,
    Scene,
    TwoCirclesTrajectory,
)
from dynct.phantom import GaussianBlob, Phantom  # noqa: E402


@pytest.fixture(scope="session")
def circle_scene():
    """Single xy circle of radius 3, identity motion, unit weight."""
    return Scene(CircleTrajectory(3.0), u_box=Box.cube(1.0))


@pytest.fixture(scope="session")
def two_circles_scene():
    return Scene(TwoCirclesTrajectory(3.0), u_box=Box.cube(1.0))


@pytest.fixture(scope="session")
def pulse_scene():
    """Two circles with a breathing radial pulse and a varying weight."""
    deform = RadialPulseDeformation(0.12, radius=1.9, freq=1.0)
    atten = PulseAttenuation(0.25, radius=1.9, freq=0.7)
    return Scene(TwoCirclesTrajectory(3.0), deform, atten, u_box=Box.cube(1.0))


@pytest.fixture(scope="session")
def blob_phantom():
    return Phantom([GaussianBlob((0.2, -0.1, 0.05), amplitude=1.0, width=0.3)])


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)
