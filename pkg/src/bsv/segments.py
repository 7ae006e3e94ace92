"""Body segment label values.

Labels are stored as unsigned bytes in meshes, clouds and mask grids; 255 marks
background.
"""
from enum import IntEnum


class SegmentLabel(IntEnum):
    HEAD = 0
    TORSO = 1
    LEFT_ARM = 2
    RIGHT_ARM = 3
    LEFT_FOREARM = 4
    RIGHT_FOREARM = 5
    LEFT_HAND = 6
    RIGHT_HAND = 7
    LEFT_THIGH = 8
    RIGHT_THIGH = 9
    LEFT_SHIN = 10
    RIGHT_SHIN = 11
    LEFT_FOOT = 12
    RIGHT_FOOT = 13
    BACKGROUND = 255

    @property
    def pretty(self) -> str:
        return self.name.replace("_", " ").title()


BODY_SEGMENTS = tuple(s for s in SegmentLabel if s != SegmentLabel.BACKGROUND)

EXTREMITIES = (SegmentLabel.HEAD, SegmentLabel.LEFT_HAND, SegmentLabel.RIGHT_HAND,
               SegmentLabel.LEFT_FOOT, SegmentLabel.RIGHT_FOOT)

EVALUATED_SEGMENTS = (SegmentLabel.TORSO,
                      SegmentLabel.LEFT_ARM, SegmentLabel.RIGHT_ARM,
                      SegmentLabel.LEFT_FOREARM, SegmentLabel.RIGHT_FOREARM,
                      SegmentLabel.LEFT_THIGH, SegmentLabel.RIGHT_THIGH,
                      SegmentLabel.LEFT_SHIN, SegmentLabel.RIGHT_SHIN)

# (left, right) pairs and the arm/leg family each part belongs to
MIRROR = {
    SegmentLabel.LEFT_ARM: SegmentLabel.RIGHT_ARM,
    SegmentLabel.LEFT_FOREARM: SegmentLabel.RIGHT_FOREARM,
    SegmentLabel.LEFT_HAND: SegmentLabel.RIGHT_HAND,
    SegmentLabel.LEFT_THIGH: SegmentLabel.RIGHT_THIGH,
    SegmentLabel.LEFT_SHIN: SegmentLabel.RIGHT_SHIN,
    SegmentLabel.LEFT_FOOT: SegmentLabel.RIGHT_FOOT,
}
MIRROR.update({v: k for k, v in list(MIRROR.items())})

LEFT_LIMBS = frozenset(s for s in SegmentLabel if s.name.startswith("LEFT_"))
RIGHT_LIMBS = frozenset(s for s in SegmentLabel if s.name.startswith("RIGHT_"))
ARM_FAMILY = frozenset(s for s in SegmentLabel if s.name.endswith(("_ARM", "_FOREARM", "_HAND")))
LEG_FAMILY = frozenset(s for s in SegmentLabel if s.name.endswith(("_THIGH", "_SHIN", "_FOOT")))

# arm part <-> leg part at the same position along the limb
FAMILY_SWAP = {
    SegmentLabel.LEFT_ARM: SegmentLabel.LEFT_THIGH,
    SegmentLabel.LEFT_FOREARM: SegmentLabel.LEFT_SHIN,
    SegmentLabel.LEFT_HAND: SegmentLabel.LEFT_FOOT,
    SegmentLabel.RIGHT_ARM: SegmentLabel.RIGHT_THIGH,
    SegmentLabel.RIGHT_FOREARM: SegmentLabel.RIGHT_SHIN,
    SegmentLabel.RIGHT_HAND: SegmentLabel.RIGHT_FOOT,
}
FAMILY_SWAP.update({v: k for k, v in list(FAMILY_SWAP.items())})
