"""
Base exceptions shared by all modules
"""


class FaceCaptureError(Exception):
    """
    Root of all errors raised by the project
    """


class UsageError(FaceCaptureError):
    """
    API or command line used in an unsupported way
    """


class ParameterError(FaceCaptureError):
    """
    Argument or config value is out of its valid range
    """


class DimensionError(FaceCaptureError):
    """
    Shapes of the operands do not match
    """


class DataError(FaceCaptureError):
    """
    Data is missing, corrupt or unusable
    """


class NumericError(FaceCaptureError):
    """
    Computation produced non-finite values
    """
