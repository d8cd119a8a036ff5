class SkipRNNError(Exception):
    exit_code = 1


class ConfigurationError(SkipRNNError, ValueError):
    """Invalid shapes, options, or experiment settings."""

    exit_code = 1


class DataError(SkipRNNError, OSError):
    """Missing, truncated, or malformed dataset files."""

    exit_code = 2


class NumericError(SkipRNNError, ArithmeticError):
    """Non-finite values or out-of-domain inputs during computation."""

    exit_code = 3
