import numpy as np
import pytest

from bsdelab import DomainSpec, InputError, contains, project


def brute_force_nearest(domain, point, n_grid=401):
    """Independent oracle: minimize the distance over a fine grid of members."""
    lo, hi = domain.bounding_box()
    axes = [np.linspace(lo[i], hi[i], n_grid) for i in range(domain.dimension)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    pts = pts[contains(domain, pts)]
    d2 = np.sum((pts - np.asarray(point)) ** 2, axis=1)
    return pts[np.argmin(d2)]


def test_contains_box_examples():
    box = DomainSpec.box([[0.0, 1.0]])
    assert contains(box, [0.5])
    assert contains(box, [1.0])
    assert not contains(box, [1.0 + 1e-12])


def test_contains_dimension_mismatch():
    box = DomainSpec.box([[0.0, 1.0]])
    with pytest.raises(InputError):
        contains(box, [0.5, 0.5])


def test_project_box_examples():
    box = DomainSpec.box([[0.0, 1.0], [0.0, 1.0]])
    assert np.allclose(project(box, [0.5, 0.5]), [0.5, 0.5])
    assert np.array_equal(project(box, [1.3, -0.2]), [1.0, 0.0])


def test_project_box_is_exact_clamp():
    box = DomainSpec.box([[-1.0, 2.0], [0.0, 1.0]])
    rng = np.random.default_rng(7)
    pts = rng.normal(0.5, 2.0, size=(200, 2))
    assert np.array_equal(project(box, pts), np.clip(pts, [-1.0, 0.0], [2.0, 1.0]))


@pytest.fixture(scope="module")
def capped_box_polytope():
    # unit normals for the box [0,2]x[0,1] plus the cap x1 <= 1
    halves = [
        ([1.0, 0.0], 2.0),
        ([-1.0, 0.0], 0.0),
        ([0.0, 1.0], 1.0),
        ([0.0, -1.0], 0.0),
        ([1.0, 0.0], 1.0),
    ]
    return DomainSpec.polytope(halves, 2)


def test_project_polytope_halfplane_cap(capped_box_polytope):
    # frozen expected value, cross-checked against the grid oracle
    got = project(capped_box_polytope, [2.0, 0.5])
    assert np.allclose(got, [1.0, 0.5], atol=1e-9)
    oracle = brute_force_nearest(capped_box_polytope, [2.0, 0.5])
    assert np.linalg.norm(got - oracle) < 2.0 / 400 + 1e-9


def test_projection_lands_inside_exactly(capped_box_polytope):
    rng = np.random.default_rng(3)
    pts = rng.normal(0.5, 3.0, size=(500, 2))
    proj = project(capped_box_polytope, pts)
    assert np.all(contains(capped_box_polytope, proj))


def test_projection_idempotent(capped_box_polytope):
    rng = np.random.default_rng(4)
    pts = rng.normal(0.5, 3.0, size=(100, 2))
    once = project(capped_box_polytope, pts)
    twice = project(capped_box_polytope, once)
    assert np.allclose(once, twice, atol=1e-11)


def test_projection_contraction(capped_box_polytope):
    rng = np.random.default_rng(5)
    pts = rng.normal(0.5, 3.0, size=(200, 2))
    proj = project(capped_box_polytope, pts)
    # interior reference points
    refs = rng.uniform([0.05, 0.05], [0.95, 0.95], size=(50, 2))
    refs = refs[contains(capped_box_polytope, refs)]
    for q in refs:
        lhs = np.linalg.norm(proj - q, axis=1)
        rhs = np.linalg.norm(pts - q, axis=1)
        assert np.all(lhs <= rhs + 1e-12)


def test_polytope_construction_rejects_unbounded():
    with pytest.raises(InputError):
        DomainSpec.polytope([([1.0, 0.0], 1.0), ([0.0, 1.0], 1.0)], 2)


def test_polytope_construction_rejects_empty_interior():
    halves = [([1.0], 0.0), ([-1.0], 0.0)]  # {x <= 0} cap {x >= 0} = {0}
    with pytest.raises(InputError):
        DomainSpec.polytope(halves, 1)


def test_box_validation():
    with pytest.raises(InputError):
        DomainSpec.box([[1.0, 0.0]])
    with pytest.raises(InputError):
        DomainSpec.box([[0.0, np.inf]])


def test_bounding_box_polytope(capped_box_polytope):
    lo, hi = capped_box_polytope.bounding_box()
    assert np.allclose(lo, [0.0, 0.0], atol=1e-9)
    assert np.allclose(hi, [1.0, 1.0], atol=1e-9)
