import pytest
from hypothesis import given
from hypothesis import strategies as st

from retrocap.crops import (
    ALL_CROP_IDS,
    CropId,
    Granularity,
    Region,
    generate_all_crops,
    generate_crops,
)

sizes = st.integers(min_value=4, max_value=500)


def regions(width, height, granularity):
    return [r for _, r in generate_crops(width, height, granularity)]


def test_original_is_full_image():
    assert regions(100, 100, Granularity.ORIGINAL) == [Region(0, 0, 100, 100)]


def test_five_crop_100x100_fixture():
    # 60x60 crops anchored at the corners plus a floored center
    assert regions(100, 100, Granularity.FIVE) == [
        Region(0, 0, 60, 60),
        Region(40, 0, 60, 60),
        Region(0, 40, 60, 60),
        Region(40, 40, 60, 60),
        Region(20, 20, 60, 60),
    ]


def test_nine_crop_90x60_fixture():
    # 45x30 crops; x offsets round(r * 45) = {0, 23, 45}, y {0, 15, 30}
    got = regions(90, 60, Granularity.NINE)
    assert [r.w for r in got] == [45] * 9
    assert [r.h for r in got] == [30] * 9
    assert [(r.x, r.y) for r in got] == [
        (0, 0), (23, 0), (45, 0),
        (0, 15), (23, 15), (45, 15),
        (0, 30), (23, 30), (45, 30),
    ]


def test_minimum_size_enforced():
    with pytest.raises(ValueError):
        generate_crops(3, 100, Granularity.FIVE)
    with pytest.raises(ValueError):
        generate_crops(100, 3, Granularity.NINE)


@given(sizes, sizes)
def test_counts_and_bounds(width, height):
    for granularity, count in ((Granularity.ORIGINAL, 1),
                               (Granularity.FIVE, 5),
                               (Granularity.NINE, 9)):
        got = generate_crops(width, height, granularity)
        assert len(got) == count
        for crop_id, r in got:
            assert crop_id.granularity is granularity
            assert r.w >= 1 and r.h >= 1
            assert 0 <= r.x and r.x + r.w <= width
            assert 0 <= r.y and r.y + r.h <= height


@given(sizes, sizes)
def test_nine_crop_union_covers_image(width, height):
    got = regions(width, height, Granularity.NINE)
    xs = sorted({r.x for r in got} | {r.x + r.w for r in got})
    covered_x = all(
        any(r.x <= a and b <= r.x + r.w for r in got)
        for a, b in zip(xs, xs[1:])
    )
    ys = sorted({r.y for r in got} | {r.y + r.h for r in got})
    covered_y = all(
        any(r.y <= a and b <= r.y + r.h for r in got)
        for a, b in zip(ys, ys[1:])
    )
    assert covered_x and covered_y
    assert min(r.x for r in got) == 0 and min(r.y for r in got) == 0
    assert max(r.x + r.w for r in got) == width
    assert max(r.y + r.h for r in got) == height


def test_all_crops_canonical_order():
    got = generate_all_crops(64, 64)
    assert [(c.granularity, c.position) for c, _ in got] == ALL_CROP_IDS
    assert len(got) == 15


def test_crop_id_validation():
    with pytest.raises(ValueError):
        CropId(Granularity.FIVE, 5)
    assert CropId(Granularity.NINE, 8).key() == "nine/8"


def test_ratio_overrides():
    got = regions(100, 100, Granularity.FIVE)
    wide = [r for r in regions(100, 100, Granularity.FIVE)]
    custom = generate_crops(100, 100, Granularity.FIVE, five_ratio=0.8)
    assert custom[0][1].w == 80
    assert got == wide
