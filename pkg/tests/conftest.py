import numpy as np
import pytest

from metface.geometry import Mesh
from metface.synthetic import SyntheticSpec, landmark_map, synth_cohort, synth_model, synth_sequence


def unit_cube(half=0.5):
    """Closed cube with a centre vertex on every face (4-triangle fans, outward)."""
    c = np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)])
    verts = [*c]
    faces = []
    for axis in range(3):
        for sign in (-1, 1):
            centre = np.zeros(3)
            centre[axis] = sign * half
            ci = len(verts)
            verts.append(centre)
            ring = [i for i in range(8) if np.sign(c[i, axis]) == sign]
            # order the four corners around the face normal
            u, v = [a for a in range(3) if a != axis]
            ang = np.arctan2(c[ring, v], c[ring, u])
            ring = [ring[k] for k in np.argsort(ang)]
            for k in range(4):
                f = [ci, ring[k], ring[(k + 1) % 4]]
                n = np.cross(np.array(verts[f[1]]) - verts[f[0]], np.array(verts[f[2]]) - verts[f[0]])
                if n[axis] * sign < 0:
                    f = [f[0], f[2], f[1]]
                faces.append(f)
    return Mesh(np.array(verts), np.array(faces))


@pytest.fixture(scope="session")
def spec():
    return SyntheticSpec()


@pytest.fixture(scope="session")
def model(spec):
    return synth_model(spec)


@pytest.fixture(scope="session")
def lmap(model):
    return landmark_map(model)


@pytest.fixture(scope="session")
def cohort(spec, model):
    return synth_cohort(spec, model)


@pytest.fixture(scope="session")
def scaled_cohort(model):
    return synth_cohort(SyntheticSpec(scale_perturbation=1.15), model)


@pytest.fixture(scope="session")
def sequence(spec, model, cohort):
    return synth_sequence(spec, model, cohort.identities[0].z)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary: one pass/fail line per criterion ---------------------------------

_criteria = []


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" in props and (report.when == "call" or report.failed):
        _criteria.append((props["criterion"], report.passed, report.duration, props.get("bound_s")))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, dt, bound in sorted(_criteria):
        limit = f" (bound {bound:g} s)" if bound else ""
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {dt:.2f} s{limit}")
