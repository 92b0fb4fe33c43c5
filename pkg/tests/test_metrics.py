import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvforge import losses, shapes
from uvforge.losses import SeamConfig
from uvforge.metrics import (
    MetricReport, conformality, equiareality, evaluate, hamming_matched, histogram, mean_seam_ao,
    rand_index, seam_vertices_hard,
)


def flat():
    # spacing 1/19: every ring distance (diagonals included) stays below 0.1 * L
    m = shapes.grid(20)
    return m, m.vertices[:, :2].copy()


# --- seams -----------------------------------------------------------------

def test_flat_embedding_no_seams():
    m, uv = flat()
    assert not seam_vertices_hard(m, uv).any()


def test_cylinder_cut_line():
    m, uv = shapes.cylinder_with_seam(n_around=24, n_along=8)
    mask = seam_vertices_hard(m, uv)
    col = np.arange(m.n_vertices) % 25
    np.testing.assert_array_equal(mask, (col == 0) | (col == 24))


def test_hard_matches_soft_limit(rng):
    m = shapes.grid(12)
    uv = m.vertices[:, :2] + rng.normal(scale=0.04, size=(m.n_vertices, 2))
    hard = seam_vertices_hard(m, uv, 0.1, weld=False)
    cfg = SeamConfig(neighbor_count=64, gamma=1e6, beta=1e6, tau_scale=0.1)
    soft = losses.soft_seam_scores(m, uv, cfg).s.data > 0.5
    assert hard.any() and not hard.all()
    assert np.mean(hard == soft) >= 0.999


def test_mean_seam_ao():
    ao = np.array([0.2, 0.9, 0.4, 0.7])
    assert mean_seam_ao(np.ones(4, bool), np.full(4, 0.3)) == pytest.approx(0.3)
    assert mean_seam_ao(np.array([1, 0, 1, 0], bool), ao) == pytest.approx(0.3)
    assert mean_seam_ao(np.zeros(4, bool), ao) is None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_mean_seam_ao_bounded(seed):
    r = np.random.default_rng(seed)
    ao = r.random(30)
    mask = r.random(30) < 0.4
    mask[r.integers(30)] = True
    v = mean_seam_ao(mask, ao)
    assert ao[mask].min() - 1e-12 <= v <= ao[mask].max() + 1e-12


# --- distortion ------------------------------------------------------------

def test_isometry_scores_one():
    m, uv = flat()
    assert conformality(m, uv) == pytest.approx(1.0, abs=1e-6)
    assert equiareality(m, uv) == pytest.approx(1.0, abs=1e-6)
    assert conformality(m, uv * 4.2 + 1) == pytest.approx(1.0, abs=1e-6)
    assert equiareality(m, uv * 0.3) == pytest.approx(1.0, abs=1e-6)


def test_cylinder_unrolled_isometric():
    m, uv = shapes.cylinder_with_seam()
    # chords vs arcs: the unrolled strip is isometric to the faceted cylinder up to O(h^2)
    assert conformality(m, uv) >= 0.99


def test_rigid_motion_invariance(rng):
    m = shapes.icosphere(1)
    uv = rng.random((m.n_vertices, 2))
    rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    moved = m.with_vertices(m.vertices @ rot.T + [1, 2, 3])
    assert conformality(moved, uv) == pytest.approx(conformality(m, uv), abs=1e-12)
    assert equiareality(moved, uv) == pytest.approx(equiareality(m, uv), abs=1e-12)


def test_shear_closed_form():
    m, uv = flat()
    stretched = uv * [2.0, 1.0]
    small, big = math.atan(0.5), math.atan(2.0)
    # every grid triangle is right isosceles; stretching gives angles (90, atan 1/2, atan 2)
    expected = (1 + small / (math.pi / 4) + (math.pi / 4) / big) / 3
    assert conformality(m, stretched) == pytest.approx(expected, abs=1e-12)


def test_equiareality_half_doubled():
    # two congruent 3D triangles; UV gives one of them twice the other's area
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], float)
    from uvforge.mesh import Mesh

    m = Mesh(v, [[0, 1, 2], [3, 4, 5]])
    uv = v[:, :2].copy()
    uv[4] = [7, 0]  # second triangle doubled in area
    # normalized areas 1/3 and 2/3 against 1/2 each: ratios 2/3 and 3/4
    assert equiareality(m, uv) == pytest.approx((2 / 3 + 3 / 4) / 2, abs=1e-12)


def test_degenerate_uv_faces_score_zero():
    m, uv = flat()
    collapsed = np.zeros_like(uv)
    assert conformality(m, collapsed) == 0.0
    assert equiareality(m, collapsed) == 0.0


# --- labels ------------------------------------------------------------------

def _hamming_brute(a, b):
    la, lb = sorted(set(a)), sorted(set(b))
    best = len(a)
    if len(la) <= len(lb):
        for perm in itertools.permutations(lb, len(la)):
            m = dict(zip(la, perm))
            best = min(best, sum(m[x] != y for x, y in zip(a, b)))
    else:
        for perm in itertools.permutations(la, len(lb)):
            m = dict(zip(lb, perm))
            best = min(best, sum(m[y] != x for x, y in zip(a, b)))
    return best / len(a)


def _rand_brute(a, b):
    n = len(a)
    agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in itertools.combinations(range(n), 2))
    return agree / (n * (n - 1) / 2)


def test_label_metric_examples(rng):
    a = rng.integers(0, 4, 30)
    perm = np.array([2, 0, 3, 1])
    assert hamming_matched(a, a) == 0.0
    assert hamming_matched(a, perm[a]) == 0.0
    assert rand_index(a, a) == 1.0
    assert rand_index([0, 0, 0, 0], [0, 1, 2, 3]) == 0.0
    with pytest.raises(ValueError):
        rand_index([1], [1])


def test_hamming_ten_elements(rng):
    for _ in range(10):
        a, b = rng.integers(0, 3, 10), rng.integers(0, 3, 10)
        assert hamming_matched(a, b) == pytest.approx(_hamming_brute(a, b), abs=1e-12)


def test_label_metrics_brute_force_200(rng):
    for _ in range(200):
        n = int(rng.integers(2, 13))
        a = rng.integers(0, rng.integers(1, 5), n)
        b = rng.integers(0, rng.integers(1, 5), n)
        assert hamming_matched(a, b) == pytest.approx(_hamming_brute(a, b), abs=1e-12)
        assert rand_index(a, b) == pytest.approx(_rand_brute(a, b), abs=1e-12)
        assert hamming_matched(a, b) == pytest.approx(hamming_matched(b, a), abs=1e-12)


# --- report ------------------------------------------------------------------

def test_histogram_sums_to_one(rng):
    h = histogram(rng.random(77))
    assert len(h) == 20 and abs(h.sum() - 1) < 1e-9


def test_evaluate_report():
    m, uv = shapes.cylinder_with_seam()
    ao = np.linspace(0, 1, m.n_vertices)
    rep = evaluate(m, uv, ao, labels=np.zeros(m.n_vertices, int), ref_labels=np.zeros(m.n_vertices, int))
    assert isinstance(rep, MetricReport)
    assert rep.seam_vertex_count == 16
    assert abs(sum(rep.histogram_seam) - 1) < 1e-9 and abs(sum(rep.histogram_all) - 1) < 1e-9
    assert rep.hamming == 0.0 and rep.rand_index == 1.0
    d = rep.to_dict()
    assert d["histogram"]["bins"] == 20
    assert len(rep.histogram_rows()) == 20
