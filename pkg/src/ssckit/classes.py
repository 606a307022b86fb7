from enum import IntEnum


class SemanticClass(IntEnum):
    """Semantic label ids. ``UNLABELED`` is reserved and never scored."""

    UNLABELED = 0
    BUILDING = 1
    TREE = 2
    ROAD = 3
    SIDEWALK = 4
    PERSON = 5
    PLANT = 6
    CAR = 7
    FENCE = 8
    SIGNBOARD = 9
    BUS = 10
    TRUCK = 11
    STREETLIGHT = 12
    BARRICADE = 13
    VAN = 14
    BICYCLE = 15
    MOTORCYCLIST = 16

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, name: str) -> "SemanticClass":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown semantic class {name!r}") from None


NUM_CLASSES = len(SemanticClass)  # 16 scored classes + unlabeled
SCORED_CLASSES = tuple(c for c in SemanticClass if c is not SemanticClass.UNLABELED)
