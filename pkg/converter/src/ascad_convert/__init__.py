"""ascad-convert: bridge ASCAD HDF5 captures into SCAT trace containers."""

from .convert import (ConvertError, ConvertSpec, LabelMismatchError,
                      MissingDatasetError, ShapeMismatchError,
                      UnsupportedDtypeError, convert)

__version__ = "0.1.0"

__all__ = ["ConvertError", "ConvertSpec", "LabelMismatchError",
           "MissingDatasetError", "ShapeMismatchError",
           "UnsupportedDtypeError", "convert"]
