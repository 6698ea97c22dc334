import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cloud(rng, n, scale=1.0):
    from cloudssm.geometry import PointCloud

    return PointCloud(rng.uniform(-scale, scale, size=(n, 3)))


def unit_tetra_mesh():
    """Smallest useful mesh: a tetrahedron."""
    from cloudssm.geometry import TriangleMesh

    verts = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
    return TriangleMesh(verts, faces)
