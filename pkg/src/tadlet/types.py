"""Type definitions and aliases for tadlet."""

from __future__ import annotations

from typing import TYPE_CHECKING, TypeAlias, TypeVar

import numpy as np
import numpy.typing as npt


if TYPE_CHECKING:
    from .registrant import RegistrantAbstract


# Type aliases that should be 100% interchangeable with a str literal
RegistrantKind: TypeAlias = str
RegistrantIdentity: TypeAlias = str

# Arrays. Segment arrays are (N, 2) with columns (start, end) in frames.
FloatArray: TypeAlias = npt.NDArray[np.float64]
IntArray: TypeAlias = npt.NDArray[np.int64]
SegmentArray: TypeAlias = npt.NDArray[np.float64]

ClassId: TypeAlias = int
VideoId: TypeAlias = str

# Type variables for generic constraints
Tr = TypeVar("Tr", bound="RegistrantAbstract", covariant=True)
