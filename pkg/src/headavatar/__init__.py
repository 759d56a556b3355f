"""Neural head avatars driven by tracked render and UV rasters.

Three style-based generators produce a face canvas, a background canvas and a
composited avatar with a foreground mask. Training combines mask, L1, cosine
embedding, ID-MRF and adversarial terms.
"""

from .errors import (AvatarError, ConfigError, CorruptionError, DegenerateInputError, FormatError,
                     IntegrityError, NumericalError, ShapeError)

__all__ = ["AvatarError", "ConfigError", "CorruptionError", "DegenerateInputError", "FormatError",
           "IntegrityError", "NumericalError", "ShapeError"]
__version__ = "0.1.0"
