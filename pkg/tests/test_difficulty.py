import pytest
from hypothesis import given, strategies as st

from blockbot import difficulty
from blockbot.difficulty import DifficultyInput, NegativeInput, score

# benchmark rows: (o, c, s) -> expected band letter
BENCH_ROWS = [
    ("move_cube", (2, 1, 2), 6, "E"),
    ("block_stacking", (4, 1, 6), 14, "M"),
    ("pyramid_stacking", (3, 1, 6), 12, "M"),
    ("house_building_1", (4, 2, 6), 18, "M"),
    ("house_building_2", (3, 2, 4), 13, "M"),
    ("house_building_3", (4, 3, 6), 22, "H"),
    ("bottle_arrangement", (6, 1, 12), 24, "H"),
    ("bin_packing", (8, 1, 16), 32, "H"),
]


def test_move_cube_row():
    s = score(DifficultyInput(2, 1, 2))
    assert s.score == 6
    assert s.band == difficulty.EASY


def test_zero_input():
    s = score(DifficultyInput(0, 0, 0))
    assert (s.score, s.band) == (0, difficulty.EASY)


def test_hand_computed_hard_case():
    s = score(DifficultyInput(4, 3, 6))
    assert s.score == 4 + 4 * 3 + 6 == 22
    assert s.band == difficulty.HARD


@pytest.mark.parametrize("name,ocs,expected_score,band", BENCH_ROWS)
def test_band_reproduction(name, ocs, expected_score, band):
    s = score(DifficultyInput(*ocs))
    assert s.score == expected_score
    assert s.band[0] == band


def test_band_boundaries():
    assert score(DifficultyInput(0, 0, 10)).band == difficulty.EASY
    assert score(DifficultyInput(0, 0, 11)).band == difficulty.MEDIUM
    assert score(DifficultyInput(0, 0, 20)).band == difficulty.MEDIUM
    assert score(DifficultyInput(0, 0, 21)).band == difficulty.HARD


def test_negative_input_rejected():
    with pytest.raises(NegativeInput):
        DifficultyInput(-1, 0, 0)


def test_more_categories_than_objects_rejected():
    with pytest.raises(ValueError):
        DifficultyInput(1, 2, 0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50),
       st.integers(0, 5), st.integers(0, 5), st.integers(0, 5))
def test_monotonicity(o, c, s, do, dc, ds):
    c = min(c, o) if o else 0
    base = score(DifficultyInput(o, c, s)).score
    assert score(DifficultyInput(o + do, c, s)).score >= base
    assert score(DifficultyInput(o, c, s + ds)).score >= base
    if c + dc <= o:
        assert score(DifficultyInput(o, c + dc, s)).score >= base
