class NumericError(RuntimeError):
    """A computation produced non-finite values or diverged."""
