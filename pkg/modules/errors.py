# modules/errors.py

"""
Exception hierarchy shared by every module.

Each class carries a `category` string that the CLI puts in its JSON error
record, so failures can be told apart without parsing messages.
"""


class MLANetError(Exception):
    """Base class for all engine errors."""

    category = "internal"

    def to_record(self) -> dict:
        return {"status": "error", "category": self.category, "message": str(self)}


class DimensionError(MLANetError, ValueError):
    category = "dimension"


class ContractError(MLANetError, ValueError):
    category = "contract"


class TensorIndexError(MLANetError, IndexError):
    category = "index"


class ConfigurationError(MLANetError, ValueError):
    category = "configuration"


class DataError(MLANetError, ValueError):
    category = "data"


class GeometryError(MLANetError, ValueError):
    category = "geometry"


class TrainingError(MLANetError, RuntimeError):
    category = "training"


class MDError(MLANetError, RuntimeError):
    category = "md"


class OracleError(MLANetError, RuntimeError):
    category = "oracle"


class ParseError(MLANetError, ValueError):
    category = "parse"


class CheckpointError(MLANetError, RuntimeError):
    category = "checkpoint"
