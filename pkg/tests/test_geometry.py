import math

import numpy as np
import pytest
import shapely
from hypothesis import given
from hypothesis import strategies as st
from shapely.geometry import LineString, Point

from hardcrowd.geometry import (
    EXIT,
    INTERIOR,
    WALL,
    Room,
    VelocityField,
    build_grid,
    compute_distance_field,
    desired_velocity_from_distance,
    distance_field_to_csv,
    point_segment_distance,
    sample_velocities,
    segments_cross,
)


def box_room(w=4.0, h=3.0, exits=None, obstacles=()):
    return Room([[0, 0], [w, 0], [w, h], [0, h]], list(obstacles), exits if exits is not None else [[[w, 1.0], [w, 2.0]]])


def test_grid_flags_and_shape():
    g = build_grid(box_room(), 0.5)
    assert g.shape == (8, 6)
    assert np.all(g.flags != WALL)
    ex = np.argwhere(g.flags == EXIT)
    # the exit x = 4, y in [1, 2] runs along the right column, rows 2 and 3
    assert sorted(map(tuple, ex.tolist())) == [(7, 2), (7, 3)]
    assert g.cell_area == 0.25


def test_obstacle_cells_are_walls():
    room = box_room(obstacles=[[[1, 1], [2, 1], [2, 2], [1, 2]]])
    g = build_grid(room, 0.25)
    i, j = g.cell_of([[1.5, 1.5]])
    assert g.flags[i[0], j[0]] == WALL
    i, j = g.cell_of([[0.5, 0.5]])
    assert g.flags[i[0], j[0]] == INTERIOR


def test_invalid_rooms():
    with pytest.raises(ValueError):
        Room([[0, 0], [1, 1]])
    with pytest.raises(ValueError):
        Room([[0, 0], [1, 0], [1, 1], [0, 1]], exits=[[[1, 0], [1, 0]]])
    with pytest.raises(ValueError):
        build_grid(box_room(), 0.0)


def test_distance_field_matches_straight_line_distance_in_convex_room():
    room = box_room(6, 4, exits=[[[6, 1.5], [6, 2.5]]])
    g = build_grid(room, 0.1)
    D = compute_distance_field(g)
    X, Y = g.centers()
    exit_line = LineString([(6, 1.5), (6, 2.5)])
    ref = np.vectorize(lambda x, y: exit_line.distance(Point(x, y)))(X, Y)
    interior = g.flags == INTERIOR
    assert np.abs(D.values[interior] - ref[interior]).max() < 1e-9
    assert np.all(D.values[g.exit_mask] == 0)


def test_distance_field_bends_around_an_obstacle():
    # wall from y=0 to y=3 at x=3 with a gap above; exit on the right
    room = Room(
        [[0, 0], [6, 0], [6, 4], [0, 4]],
        [[[2.9, 0.0], [3.1, 0.0], [3.1, 3.0], [2.9, 3.0]]],
        [[[6, 0.0], [6, 1.0]]],
    )
    g = build_grid(room, 0.05)
    D = compute_distance_field(g)
    p = np.array([1.025, 0.525])
    i, j = g.cell_of([p])
    c = np.array([g.xc[i[0]], g.yc[j[0]]])
    # shortest path: to the obstacle corner (2.9, 3.0), across to (3.1, 3.0), then straight to the exit end (6, 1)
    ref = math.dist(c, (2.9, 3.0)) + 0.2 + math.dist((3.1, 3.0), (6.0, 1.0))
    assert D.values[i[0], j[0]] == pytest.approx(ref, rel=0.02)
    assert D.values[i[0], j[0]] >= ref - 1e-9


def test_unreachable_cells_are_flagged():
    # an L-shaped obstacle seals off the top-left corner of the room
    pocket_wall = [[0.0, 2.8], [1.2, 2.8], [1.2, 4.0], [1.0, 4.0], [1.0, 3.0], [0.0, 3.0]]
    room = Room([[0, 0], [4, 0], [4, 4], [0, 4]], [pocket_wall], [[[4, 1], [4, 2]]])
    g = build_grid(room, 0.1)
    D = compute_distance_field(g)
    i, j = g.cell_of([[0.5, 3.5]])
    assert not D.reachable[i[0], j[0]]
    assert D.disconnected[i[0], j[0]]
    i, j = g.cell_of([[0.5, 0.5]])
    assert D.reachable[i[0], j[0]]


def test_no_exit_is_an_error():
    g = build_grid(Room([[0, 0], [1, 0], [1, 1], [0, 1]]), 0.1)
    with pytest.raises(ValueError):
        compute_distance_field(g)


def test_desired_velocity_is_unit_and_points_downhill():
    g = build_grid(box_room(6, 4, exits=[[[6, 0], [6, 4]]]), 0.1)
    U = desired_velocity_from_distance(compute_distance_field(g), 1.3)
    inner = g.flags == INTERIOR
    sp = np.hypot(U.values[..., 0], U.values[..., 1])
    np.testing.assert_allclose(sp[inner], 1.3, atol=1e-12)
    np.testing.assert_allclose(U.values[inner, 0], 1.3, atol=1e-9)


def test_raw_gradient_option_caps_speed():
    g = build_grid(box_room(6, 4, exits=[[[6, 0], [6, 4]]]), 0.1)
    U = desired_velocity_from_distance(compute_distance_field(g), 2.0, normalize=False)
    assert U.max_speed <= 2.0 + 1e-12


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_bilinear_sampling_reproduces_linear_fields(fx, fy, a, b, c):
    g = build_grid(box_room(4, 3, exits=[[[4, 0], [4, 3]]]), 0.25)
    X, Y = g.centers()
    vals = np.stack([a * X + b * Y + c, -b * X + a * Y], axis=-1)
    f = VelocityField(g, vals)
    # points between the first and last cell centers
    p = np.array([[g.xc[0] + fx * (g.xc[-1] - g.xc[0]), g.yc[0] + fy * (g.yc[-1] - g.yc[0])]])
    got = sample_velocities(f, p)[0]
    np.testing.assert_allclose(got, [a * p[0, 0] + b * p[0, 1] + c, -b * p[0, 0] + a * p[0, 1]], atol=1e-10)


def test_sampling_ignores_wall_cells():
    room = box_room(4, 3, exits=[[[4, 0], [4, 3]]], obstacles=[[[2.0, 0.0], [4.0, 0.0], [4.0, 1.0], [2.0, 1.0]]])
    g = build_grid(room, 0.5)
    vals = np.zeros(g.shape + (2,))
    vals[g.open_mask] = [1.0, 0.0]
    got = sample_velocities(VelocityField(g, vals), [[2.0, 1.0]])[0]
    np.testing.assert_allclose(got, [1.0, 0.0])


@given(
    st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=6),
    st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=4),
)
def test_point_segment_distance_matches_shapely(points, segs):
    P = np.array(points, dtype=float)
    S = np.array(segs, dtype=float).reshape(-1, 2, 2)
    S = S[np.linalg.norm(S[:, 1] - S[:, 0], axis=1) > 1e-6]
    if len(S) == 0:
        return
    d, cl = point_segment_distance(P, S)
    ref = shapely.distance(shapely.points(P)[:, None], shapely.linestrings(S)[None, :])
    np.testing.assert_allclose(d, ref, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(P[:, None] - cl, axis=-1), d, atol=1e-9)


def test_segments_cross():
    seg = np.array([[1.0, -1.0], [1.0, 1.0]])
    p0 = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 2.0], [1.0, 0.0]])
    p1 = np.array([[2.0, 0.0], [0.5, 0.0], [2.0, 2.0], [1.0, 0.0]])
    assert segments_cross(p0, p1, seg).tolist() == [True, False, False, False]


def test_distance_field_csv(tmp_path):
    g = build_grid(box_room(), 0.5)
    D = compute_distance_field(g)
    distance_field_to_csv(D, tmp_path / "d.csv")
    arr = np.loadtxt(tmp_path / "d.csv", delimiter=",")
    assert arr.shape == (g.ny, g.nx)
    np.testing.assert_allclose(arr[::-1].T, D.values, rtol=1e-9)
