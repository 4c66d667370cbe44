import numpy as np
import pytest

from anchordet.geom import Box2D, Box3D, CameraModel, Point3
from anchordet.raster import PointCloud
from anchordet.synth import SceneConfig, generate_scene
from anchordet.targets import LinkedLabel, ObjectClass

# one "N. name: PASS|FAIL (detail)" line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def report(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"{number}. {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def cam():
    return CameraModel.from_hfov(1580, 320, 30.0)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneConfig(seed=3, n_vehicle=4, n_vru=2, n_construction=2), 0)


def random_box3d(rng, rmin=100.0, rmax=500.0):
    r = rng.uniform(rmin, rmax)
    az = rng.uniform(-0.2, 0.2)
    y = rng.uniform(-2.0, 2.0)
    return Box3D(Point3(r * np.sin(az), y, r * np.cos(az)), rng.uniform(0.4, 3.0), rng.uniform(0.4, 6.0),
                 rng.uniform(0.5, 2.0), rng.uniform(-np.pi, np.pi))


def random_cloud(rng, n=2000):
    # clustered so many points share pixels
    base = rng.uniform([-60, -8, 60], [60, 8, 400], (n // 4, 3))
    pts = np.repeat(base, 4, axis=0) * rng.uniform(0.98, 1.02, (len(base) * 4, 1))
    pts = np.vstack([pts, rng.uniform([-5, -2, -10], [5, 2, 0], (20, 3))])
    return PointCloud(pts, np.full(len(pts), -1))


def point_on_box(rng, box):
    """A point inside the box footprint at a random height within it."""
    fwd, lat = box.axes()
    return (np.asarray(box.centroid) + rng.uniform(-0.5, 0.5) * box.l * fwd + rng.uniform(-0.5, 0.5) * box.w * lat
            + [0, rng.uniform(-0.5, 0.5) * box.h, 0])


def random_label(rng, cam, lid=0):
    b3 = random_box3d(rng)
    b2 = Box2D(rng.uniform(0, cam.width), rng.uniform(0, cam.height), rng.uniform(1, 60), rng.uniform(1, 30))
    return LinkedLabel(lid, ObjectClass(int(rng.integers(1, 4))), b2, b3)
