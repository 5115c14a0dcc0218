import numpy as np

from lesiondet.autodiff.tensor import Tensor


"""
    gradcheck.py

    Central finite-difference checks for the autodiff operations. The
    function under test maps a list of float64 Tensors to a Tensor; the
    scalar objective is the sum of the output weighted by a fixed random
    projection, so every output element participates.
"""


def numerical_gradient(objective, arrays: list, index: int, eps: float = 1e-4) -> np.ndarray:
    """ Central differences of a scalar objective w.r.t. one input.

    :param objective: callable taking the list of arrays, returning a float
    :param arrays: list of float64 input arrays (one is perturbed in place
        and restored)
    :param index: which input to differentiate
    :param eps: perturbation size
    :return: gradient array shaped like arrays[index]
    """
    target = arrays[index]
    grad = np.zeros_like(target)

    for i in range(target.size):
        original = target.flat[i]

        target.flat[i] = original + eps
        plus = objective(arrays)
        target.flat[i] = original - eps
        minus = objective(arrays)
        target.flat[i] = original

        grad.flat[i] = (plus - minus) / (2 * eps)

    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """ ||a - n|| / max(||a|| + ||n||, floor) over the whole array. """
    scale = max(float(np.linalg.norm(analytic)) + float(np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / scale


def check_gradients(fn, arrays: list, rng: np.random.Generator, eps: float = 1e-4) -> list:
    """ Compares analytic and numerical gradients for every input.

    :param fn: callable taking Tensors and returning a Tensor
    :param arrays: float64 input arrays
    :param rng: source of the output projection
    :param eps: perturbation size
    :return: list of relative errors, one per input
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a.copy()) for a in arrays])
    projection = rng.standard_normal(probe.shape)

    def objective(values):
        return float(np.sum(fn(*[Tensor(v.copy()) for v in values]).data * projection))

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*tensors).backward(projection)

    errors = []
    for index, tensor in enumerate(tensors):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(arrays[index])
        errors.append(relative_error(analytic, numerical_gradient(objective, arrays, index, eps)))

    return errors
