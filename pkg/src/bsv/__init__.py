"""Body segment volumes from two opposing depth views and a deformed template."""

__version__ = "0.1.0"

from .mesh import TriangleMesh, signed_volume  # noqa: E402
from .pointcloud import LabeledPointCloud, RigidTransform  # noqa: E402
from .scan import ErrorCondition  # noqa: E402
from .segments import SegmentLabel  # noqa: E402

__all__ = ["TriangleMesh", "LabeledPointCloud", "RigidTransform", "ErrorCondition",
           "SegmentLabel", "signed_volume", "__version__"]
