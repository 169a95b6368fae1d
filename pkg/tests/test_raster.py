import numpy as np
import pytest

from dynamite import raster


# ---------------------------------------------------------------------------
# independent oracles


def flood_fill_components(mask):
    """Brute-force BFS flood fill, 8-connectivity."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                stack = [(r, c)]
                seen[r, c] = True
                pixels = []
                while stack:
                    pr, pc = stack.pop()
                    pixels.append((pr, pc))
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            nr, nc = pr + dr, pc + dc
                            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                                seen[nr, nc] = True
                                stack.append((nr, nc))
                comps.append(frozenset(pixels))
    return comps


def brute_force_edt_sq(mask):
    """All-pairs squared distance to the nearest false pixel or border."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.int64)
    false_pts = np.argwhere(~mask)
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            best = min(r + 1, h - r, c + 1, w - c) ** 2
            if false_pts.size:
                d = (false_pts[:, 0] - r) ** 2 + (false_pts[:, 1] - c) ** 2
                best = min(best, int(d.min()))
            out[r, c] = best
    return out


# ---------------------------------------------------------------------------
# connected components


def test_components_empty_mask():
    assert raster.connected_components(np.zeros((4, 4), dtype=bool)) == []


def test_components_diagonal_pixels_join():
    m = np.zeros((3, 3), dtype=bool)
    m[0, 0] = m[1, 1] = True
    comps = raster.connected_components(m)
    assert len(comps) == 1
    assert comps[0].area == 2


def test_components_sorted_by_area_then_seed():
    m = np.zeros((6, 6), dtype=bool)
    m[0:2, 0:2] = True  # area 4, seed (0,0)
    m[4, 4] = True  # area 1
    m[4, 0:2] = True  # area 2
    comps = raster.connected_components(m)
    assert [c.area for c in comps] == [4, 2, 1]
    assert comps[0].seed == (0, 0)


def test_components_match_flood_fill_oracle():
    rng = np.random.default_rng(42)
    for _ in range(40):
        h, w = rng.integers(2, 33, size=2)
        mask = rng.random((h, w)) < rng.uniform(0.2, 0.8)
        got = {frozenset(zip(c.rows.tolist(), c.cols.tolist())) for c in raster.connected_components(mask)}
        want = set(flood_fill_components(mask))
        assert got == want


def test_components_areas_sum_to_popcount():
    rng = np.random.default_rng(7)
    mask = rng.random((20, 20)) < 0.5
    comps = raster.connected_components(mask)
    assert sum(c.area for c in comps) == int(mask.sum())


# ---------------------------------------------------------------------------
# distance transform


def test_edt_single_pixel():
    m = np.zeros((5, 5), dtype=bool)
    m[2, 2] = True
    d = raster.distance_transform(m)
    assert d[2, 2] == 1.0
    assert d.sum() == 1.0


def test_edt_full_grid_center_is_three():
    m = np.ones((5, 5), dtype=bool)
    d = raster.distance_transform(m)
    assert d[2, 2] == brute_force_edt_sq(m)[2, 2] ** 0.5
    assert d[2, 2] == 3.0


def test_edt_matches_brute_force_exactly():
    rng = np.random.default_rng(123)
    for _ in range(30):
        h, w = rng.integers(1, 33, size=2)
        mask = rng.random((h, w)) < rng.uniform(0.3, 0.9)
        assert np.array_equal(raster.distance_transform_sq(mask), brute_force_edt_sq(mask))


# ---------------------------------------------------------------------------
# error region and click placement


def test_error_region_identity_and_xor():
    a = np.zeros((4, 4), dtype=bool)
    a[0:2, 0:2] = True
    assert not raster.error_region(a, a).any()
    assert np.array_equal(raster.error_region(np.zeros_like(a), a), a)
    b = np.zeros_like(a)
    b[1:3, 1:3] = True
    want = a ^ b
    assert np.array_equal(raster.error_region(a, b), want)


def test_error_region_dim_mismatch():
    with pytest.raises(ValueError):
        raster.error_region(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))


def test_click_point_single_pixel():
    m = np.zeros((4, 4), dtype=bool)
    m[1, 3] = True
    assert raster.click_point(m) == (1, 3)


def test_click_point_square_center():
    m = np.zeros((9, 9), dtype=bool)
    m[2:7, 2:7] = True
    assert raster.click_point(m) == (4, 4)


def test_click_point_always_inside_region():
    rng = np.random.default_rng(5)
    for _ in range(30):
        mask = rng.random((12, 12)) < 0.4
        if not mask.any():
            continue
        r, c = raster.click_point(mask)
        assert mask[r, c]


def test_click_point_empty_region_raises():
    with pytest.raises(ValueError):
        raster.click_point(np.zeros((3, 3), dtype=bool))


def test_click_point_exclusions():
    m = np.zeros((5, 5), dtype=bool)
    m[2, 1:4] = True
    first = raster.click_point(m)
    second = raster.click_point(m, exclude={first})
    assert second != first and m[second]
    with pytest.raises(LookupError):
        raster.click_point(m, exclude={(2, 1), (2, 2), (2, 3)})
