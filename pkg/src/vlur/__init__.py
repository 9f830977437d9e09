"""Text-guided restoration of images with single and composite weather degradations."""

__version__ = "0.1.0"

from .errors import VLURError  # noqa: E402
from .types import ALL_TYPES, DegradationType  # noqa: E402

__all__ = ["ALL_TYPES", "DegradationType", "VLURError", "__version__"]
