import numpy as np
import pytest

from posecode.mesh import TriangleMesh, make_icosahedron


@pytest.fixture
def tetrahedron():
    verts = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriangleMesh(verts, faces)


@pytest.fixture
def icosahedron():
    return make_icosahedron(radius=100.0)


def brute_force_edges(faces):
    """Independent edge enumeration: every unordered vertex pair used by a face."""
    edges = set()
    for a, b, c in np.asarray(faces):
        edges.add(tuple(sorted((int(a), int(b)))))
        edges.add(tuple(sorted((int(b), int(c)))))
        edges.add(tuple(sorted((int(c), int(a)))))
    return edges
