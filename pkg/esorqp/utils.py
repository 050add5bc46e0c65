import numpy as np


class EsorError(Exception):
    """Base class of the errors raised by esorqp.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, message):
        self.message = message
        super().__init__(self.message)


class NonFiniteValue(EsorError):
    """Exception raised when an array holds NaN or Inf entries.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, what, value):
        super().__init__(f"Non-finite entries in {what}: {value}")


def as_vector(value, what="vector"):
    """Convert a value to a finite one-dimensional float array.

    Parameters:
        value: array_like
            A scalar or a sequence of numbers.
        what: str
            A name for the value, used in the error message.

    Returns:
        A numpy array of shape (n,).

    Exceptions:
        NonFiniteValue: If any entry is NaN or infinite.

    Examples:
        >>> as_vector([1, 2]).tolist()
        [1.0, 2.0]
        >>> as_vector(3.0).shape
        (1,)
    """
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"Expected a one-dimensional {what}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(what, arr)
    return arr


def as_matrix(value, what="matrix"):
    """Convert a value to a finite two-dimensional float array.

    Parameters:
        value: array_like
            A nested sequence of numbers.
        what: str
            A name for the value, used in the error message.

    Exceptions:
        NonFiniteValue: If any entry is NaN or infinite.

    Examples:
        >>> as_matrix([[1, 0], [0, 1]]).shape
        (2, 2)
    """
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise ValueError(f"Expected a two-dimensional {what}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(what, arr)
    return arr


def numerical_gradient(fun, x, eps=1e-6):
    """Central finite-difference gradient of a scalar function.

    Parameters:
        fun: callable
            Maps a state vector to a real number.
        x: array_like
            The point of evaluation.
        eps: float
            The step, scaled by max(1, |x_i|) per coordinate.

    Examples:
        >>> numerical_gradient(lambda x: x[0] * x[1], [2.0, 3.0]).round(6).tolist()
        [3.0, 2.0]
    """
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = eps * max(1.0, abs(x[i]))
        forward = x.copy()
        backward = x.copy()
        forward[i] += step
        backward[i] -= step
        grad[i] = (fun(forward) - fun(backward)) / (2 * step)
    return grad


def numerical_jacobian(fun, x, eps=1e-6):
    """Central finite-difference Jacobian of a vector function.

    Returns:
        An array of shape (len(fun(x)), len(x)).
    """
    x = np.asarray(x, dtype=float)
    columns = []
    for i in range(x.size):
        step = eps * max(1.0, abs(x[i]))
        forward = x.copy()
        backward = x.copy()
        forward[i] += step
        backward[i] -= step
        columns.append((np.asarray(fun(forward)) - np.asarray(fun(backward))) / (2 * step))
    return np.stack(columns, axis=1)
