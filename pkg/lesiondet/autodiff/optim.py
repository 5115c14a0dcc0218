import logging
import math

import numpy as np

from lesiondet.core.errors import InvalidArgumentError, ShapeError


"""
    optim.py

    Stochastic gradient descent with classical momentum and the
    reduce-on-plateau learning-rate schedule driven by validation loss.
"""

logger = logging.getLogger(__name__)


class SgdMomentum:
    def __init__(self, learning_rate: float = 0.005, momentum: float = 0.9):
        """
        :param learning_rate: step size, positive
        :param momentum: velocity decay in [0, 1)
        """
        if not learning_rate > 0:
            raise InvalidArgumentError(f"Learning rate must be positive, got {learning_rate}.")

        if not 0 <= momentum < 1:
            raise InvalidArgumentError(f"Momentum must lie in [0, 1), got {momentum}.")

        self.learning_rate: float = float(learning_rate)
        self.momentum: float = float(momentum)
        self.velocity: dict = {}

    def register(self, params: dict) -> None:
        """ Creates one zero velocity buffer per named parameter array. """
        self.velocity = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, tensors: dict) -> None:
        """ Applies one update to named Tensors using their accumulated
        gradients. Tensors without a gradient are treated as having a
        zero gradient.
        """
        params = {name: t.data for name, t in tensors.items()}
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors.items()}
        sgd_step(params, grads, self)


def sgd_step(params: dict, grads: dict, state: SgdMomentum) -> dict:
    """ Classical momentum update, in place:

        v <- m * v + g
        p <- p - lr * v

    :param params: name -> parameter array (updated in place)
    :param grads: name -> gradient array
    :param state: optimizer holding learning rate, momentum and velocities
    :return: params
    """
    if set(params) != set(state.velocity):
        raise ShapeError("Velocity buffers must exist one-to-one with the parameters.")

    for name, value in params.items():
        grad = grads[name]
        velocity = state.velocity[name]

        if grad.shape != value.shape or velocity.shape != value.shape:
            raise ShapeError(f"Parameter '{name}' has shape {value.shape} but gradient {grad.shape} "
                             f"and velocity {velocity.shape}.")

        velocity *= state.momentum
        velocity += grad
        value -= state.learning_rate * velocity

    return params


class PlateauSchedule:
    def __init__(self, learning_rate: float = 0.005, factor: float = 0.5, patience: int = 5,
                 threshold: float = 1e-6):
        """
        :param learning_rate: initial learning rate
        :param factor: multiplicative reduction in (0, 1)
        :param patience: epochs without improvement before a reduction
        :param threshold: absolute improvement required
        """
        if not 0 < factor < 1:
            raise InvalidArgumentError(f"Plateau factor must lie in (0, 1), got {factor}.")

        if patience < 1:
            raise InvalidArgumentError(f"Plateau patience must be positive, got {patience}.")

        self.learning_rate: float = float(learning_rate)
        self.factor: float = float(factor)
        self.patience: int = int(patience)
        self.threshold: float = float(threshold)
        self.best_loss: float = math.inf
        self.epochs_since_improve: int = 0

    def update(self, val_loss: float) -> float:
        """ Records one epoch's validation loss. NaN never counts as an
        improvement.

        :param val_loss: validation loss of the finished epoch
        :return: learning rate for the next epoch
        """
        if val_loss < self.best_loss - self.threshold:
            self.best_loss = float(val_loss)
            self.epochs_since_improve = 0
            return self.learning_rate

        self.epochs_since_improve += 1

        if self.epochs_since_improve >= self.patience:
            self.learning_rate *= self.factor
            self.epochs_since_improve = 0
            logger.info("Validation loss stalled for %d epochs, learning rate reduced to %g.",
                        self.patience, self.learning_rate)

        return self.learning_rate

    def state_dict(self) -> dict:
        return {
            'learning_rate': self.learning_rate,
            'factor': self.factor,
            'patience': self.patience,
            'threshold': self.threshold,
            'best_loss': None if math.isinf(self.best_loss) else self.best_loss,
            'epochs_since_improve': self.epochs_since_improve,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> 'PlateauSchedule':
        schedule = cls(state['learning_rate'], state['factor'], state['patience'], state['threshold'])
        schedule.best_loss = math.inf if state['best_loss'] is None else float(state['best_loss'])
        schedule.epochs_since_improve = int(state['epochs_since_improve'])
        return schedule
