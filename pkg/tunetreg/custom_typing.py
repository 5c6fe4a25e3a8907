from typing import Tuple

ShapeType = Tuple[int, int, int]
SpacingType = Tuple[float, float, float]
DiceMapType = dict[int, float]
