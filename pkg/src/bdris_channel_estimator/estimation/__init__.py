"""The three estimation stages and the protocol that chains them."""

from .protocol import EstimateBundle, run_protocol
from .stage1 import AoaEstimate, estimate_common_aoa
from .stage2 import TypicalUserEstimate, estimate_typical_user
from .stage3 import CommonPart, OtherUserEstimate, build_common_part, estimate_other_user

__all__ = [
    "AoaEstimate",
    "CommonPart",
    "EstimateBundle",
    "OtherUserEstimate",
    "TypicalUserEstimate",
    "build_common_part",
    "estimate_common_aoa",
    "estimate_other_user",
    "estimate_typical_user",
    "run_protocol",
]
