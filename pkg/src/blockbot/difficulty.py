"""Task difficulty metric: score = o + o*c + s, banded easy/medium/hard."""

from __future__ import annotations

from dataclasses import dataclass

EASY = "EASY"
MEDIUM = "MEDIUM"
HARD = "HARD"

EASY_MAX = 10
MEDIUM_MAX = 20


class NegativeInput(ValueError):
    """Difficulty inputs must be non-negative."""


@dataclass(frozen=True)
class DifficultyInput:
    objects: int     # o: number of objects
    categories: int  # c: object categories
    steps: int       # s: pick/place actions to finish

    def __post_init__(self):
        if min(self.objects, self.categories, self.steps) < 0:
            raise NegativeInput(f"negative difficulty input: {self}")
        if self.objects > 0 and self.categories > self.objects:
            raise ValueError("more categories than objects")


@dataclass(frozen=True)
class DifficultyScore:
    score: int
    band: str


def score(inp: DifficultyInput) -> DifficultyScore:
    o, c, s = inp.objects, inp.categories, inp.steps
    value = o + o * c + s
    if value <= EASY_MAX:
        band = EASY
    elif value <= MEDIUM_MAX:
        band = MEDIUM
    else:
        band = HARD
    return DifficultyScore(score=value, band=band)
