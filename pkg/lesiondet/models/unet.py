import logging
import math

import numpy as np

from lesiondet.autodiff import functional as F
from lesiondet.autodiff.tensor import Tensor, no_grad
from lesiondet.core.errors import InvalidArgumentError, ShapeError
from lesiondet.core.imaging.image import Image
from lesiondet.core.io import txt
from lesiondet.core.io.checkpoint import read_ckpt1, write_ckpt1
from lesiondet.detection.candidates import ProbabilityMap


"""
    unet.py

    The modified u-net used as candidate detector. Every level of the
    contracting path runs two (3x3 conv -> batch norm -> ReLU) blocks and
    a 2x2 max pool; the filter count doubles per level. The expanding path
    mirrors it with 2x2 up-convolutions and skip concatenations, and a
    1x1 convolution followed by a pixel-wise sigmoid produces the
    probability map. All convolutions are zero-padded, so the output map
    has the input's size and the network accepts any input whose sides
    are multiples of 2^depth.
"""

logger = logging.getLogger(__name__)

TRAIN, EVAL = 'train', 'eval'


class UnetConfig:
    def __init__(self, depth: int = 3, base_filters: int = 8, in_channels: int = 1):
        """
        :param depth: number of pooling stages
        :param base_filters: channels of the first level
        :param in_channels: image channels
        """
        if depth < 1 or base_filters < 1 or in_channels < 1:
            raise InvalidArgumentError(f"Invalid u-net configuration depth={depth}, "
                                       f"base_filters={base_filters}, in_channels={in_channels}.")

        self.depth: int = int(depth)
        self.base_filters: int = int(base_filters)
        self.in_channels: int = int(in_channels)

    @property
    def multiple(self) -> int:
        """ Spatial sides must be divisible by this value. """
        return 2 ** self.depth

    def channels(self, level: int) -> int:
        """ Channel count at a level; the bottleneck is level `depth`. """
        return self.base_filters * 2 ** level

    def to_dict(self) -> dict:
        return {'depth': self.depth, 'base_filters': self.base_filters, 'in_channels': self.in_channels}

    @classmethod
    def from_dict(cls, values: dict) -> 'UnetConfig':
        return cls(values['depth'], values['base_filters'], values.get('in_channels', 1))

    def __eq__(self, other):
        return isinstance(other, UnetConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"UnetConfig(depth={self.depth}, base_filters={self.base_filters})"


# Standard u-net widths doubled; used for shape checks only.
FULL_SIZE_CONFIG = UnetConfig(depth=4, base_filters=128)


class CropRecord:
    def __init__(self, height: int, width: int, origin: tuple = (0, 0)):
        """ Region of a padded array holding the original content. """
        self.height = height
        self.width = width
        self.origin = origin

    def crop(self, x):
        """ Inverts `pad_to_grid` on a Tensor, keeping it in the graph, or on an array. """
        r, c = self.origin
        if isinstance(x, Tensor):
            return F.crop(x, r, c, self.height, self.width)

        return np.ascontiguousarray(x[..., r:r + self.height, c:c + self.width])

    def __eq__(self, other):
        return (isinstance(other, CropRecord) and
                (self.height, self.width, self.origin) == (other.height, other.width, other.origin))

    def __repr__(self):
        return f"CropRecord({self.height}, {self.width}, origin={self.origin})"


def pad_to_grid(x, multiple: int) -> tuple:
    """ Zero-pads the bottom and right edges up to the next multiple.

    :param x: Tensor or array whose last two axes are spatial
    :param multiple: required divisor, at least 1
    :return: (padded Tensor or array, CropRecord)
    """
    if multiple < 1:
        raise InvalidArgumentError(f"Grid multiple must be at least 1, got {multiple}.")

    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    height, width = data.shape[-2:]
    pad_h = -height % multiple
    pad_w = -width % multiple

    widths = [(0, 0)] * (data.ndim - 2) + [(0, pad_h), (0, pad_w)]
    padded = np.pad(data, widths) if pad_h or pad_w else data

    record = CropRecord(height, width)
    return (Tensor(padded) if isinstance(x, Tensor) else padded), record


class UnetModel:
    def __init__(self, config: UnetConfig, parameters: dict, buffers: dict):
        """
        :param config: architecture
        :param parameters: name -> Tensor, in construction order
        :param buffers: batch-norm layer name -> BatchNormState
        """
        self.config: UnetConfig = config
        self.parameters: dict = parameters
        self.buffers: dict = buffers
        self.mode: str = TRAIN

    def train(self) -> 'UnetModel':
        self.mode = TRAIN
        return self

    def eval(self) -> 'UnetModel':
        self.mode = EVAL
        return self

    def named_parameters(self) -> dict:
        return self.parameters

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters.values()))

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.zero_grad()

    def _conv_block(self, prefix: str, index: int, x: Tensor) -> Tensor:
        p = self.parameters
        x = F.conv2d(x, p[f'{prefix}.conv{index}.weight'], p[f'{prefix}.conv{index}.bias'])
        x = F.batch_norm(x, p[f'{prefix}.bn{index}.gamma'], p[f'{prefix}.bn{index}.beta'],
                         self.buffers[f'{prefix}.bn{index}'], training=self.mode == TRAIN)
        return F.relu(x)

    def _double_block(self, prefix: str, x: Tensor) -> Tensor:
        return self._conv_block(prefix, 2, self._conv_block(prefix, 1, x))

    def check_input(self, x: Tensor) -> None:
        """ Raises a ShapeError unless x is (N, in_channels, H, W) with H
        and W divisible by 2^depth.
        """
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"Expected {self.config.in_channels} input channel(s), got {x.shape[1]}.")

        multiple = self.config.multiple
        if x.shape[2] % multiple or x.shape[3] % multiple:
            raise ShapeError(f"Input size {x.shape[2]}x{x.shape[3]} must be a multiple of {multiple} "
                             f"for depth {self.config.depth}; pad with pad_to_grid.")

    def forward_logits(self, x: Tensor) -> Tensor:
        """ Runs the network up to the 1x1 head, before the sigmoid. """
        self.check_input(x)

        skips = []
        for level in range(self.config.depth):
            x = self._double_block(f'enc{level}', x)
            skips.append(x)
            x = F.maxpool2(x)

        x = self._double_block('bottleneck', x)

        for level in reversed(range(self.config.depth)):
            x = F.upconv2(x, self.parameters[f'dec{level}.up.weight'])
            x = F.concat_channels(skips[level], x)
            x = self._double_block(f'dec{level}', x)

        return F.conv2d(x, self.parameters['head.weight'], self.parameters['head.bias'])

    def forward(self, x: Tensor) -> Tensor:
        """ Probability map with the input's spatial shape, values in (0, 1). """
        return F.sigmoid(self.forward_logits(x))

    def state_arrays(self) -> dict:
        """ Parameters followed by batch-norm running statistics. """
        arrays = {name: p.data for name, p in self.parameters.items()}
        for name, state in self.buffers.items():
            arrays[f'{name}.running_mean'] = state.running_mean
            arrays[f'{name}.running_var'] = state.running_var
        return arrays

    def load_state_arrays(self, arrays: dict) -> None:
        """ Restores parameters and running statistics, checking shapes. """
        for name, p in self.parameters.items():
            p.data = _checked(arrays, name, p.data.shape).copy()

        for name, state in self.buffers.items():
            state.running_mean = _checked(arrays, f'{name}.running_mean', state.running_mean.shape).copy()
            state.running_var = _checked(arrays, f'{name}.running_var', state.running_var.shape).copy()


def _checked(arrays: dict, name: str, shape: tuple) -> np.ndarray:
    if name not in arrays:
        raise ShapeError(f"Checkpoint has no entry '{name}'.")

    if arrays[name].shape != shape:
        raise ShapeError(f"Checkpoint entry '{name}' has shape {arrays[name].shape}, expected {shape}.")

    return arrays[name]


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.float32(math.sqrt(6.0 / fan_in))
    return (2 * rng.random(shape, dtype=np.float32) - 1) * bound


def build(config: UnetConfig, seed: int) -> UnetModel:
    """ Creates a u-net with fan-in scaled uniform weights, zero biases,
    unit batch-norm scales and zero shifts. Equal seeds give bit-identical
    parameters.

    :param config: architecture
    :param seed: initialization seed
    :return: model in training mode
    """
    rng = np.random.default_rng(seed)
    parameters, buffers = {}, {}

    def add_conv(name: str, in_ch: int, out_ch: int, k: int) -> None:
        parameters[f'{name}.weight'] = Tensor(_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k),
                                              requires_grad=True, name=f'{name}.weight')
        parameters[f'{name}.bias'] = Tensor(np.zeros((1, out_ch, 1, 1), dtype=np.float32),
                                            requires_grad=True, name=f'{name}.bias')

    def add_block(prefix: str, in_ch: int, out_ch: int) -> None:
        for index, channels_in in ((1, in_ch), (2, out_ch)):
            add_conv(f'{prefix}.conv{index}', channels_in, out_ch, 3)
            parameters[f'{prefix}.bn{index}.gamma'] = Tensor(np.ones((1, out_ch, 1, 1), dtype=np.float32),
                                                             requires_grad=True, name=f'{prefix}.bn{index}.gamma')
            parameters[f'{prefix}.bn{index}.beta'] = Tensor(np.zeros((1, out_ch, 1, 1), dtype=np.float32),
                                                            requires_grad=True, name=f'{prefix}.bn{index}.beta')
            buffers[f'{prefix}.bn{index}'] = F.BatchNormState(out_ch)

    in_ch = config.in_channels
    for level in range(config.depth):
        add_block(f'enc{level}', in_ch, config.channels(level))
        in_ch = config.channels(level)

    add_block('bottleneck', in_ch, config.channels(config.depth))

    for level in reversed(range(config.depth)):
        below, here = config.channels(level + 1), config.channels(level)
        parameters[f'dec{level}.up.weight'] = Tensor(_uniform(rng, (below, here, 2, 2), below),
                                                     requires_grad=True, name=f'dec{level}.up.weight')
        add_block(f'dec{level}', 2 * here, here)

    add_conv('head', config.channels(0), 1, 1)

    model = UnetModel(config, parameters, buffers)
    logger.debug("Built %r with %d parameters.", config, model.parameter_count())
    return model


def infer_full_image(model: UnetModel, img: Image) -> ProbabilityMap:
    """ Evaluates the network on a complete preprocessed image. The image
    is zero-padded to the grid multiple, run in evaluation mode without
    recording a graph, and cropped back.

    :param model: trained model
    :param img: preprocessed image on the working grid
    :return: probability map congruent with the image
    """
    padded, record = pad_to_grid(Tensor(img.pixels[None, None].astype(np.float32)), model.config.multiple)

    previous = model.mode
    model.eval()
    try:
        with no_grad():
            probabilities = model.forward(padded)
    finally:
        model.mode = previous

    return ProbabilityMap(record.crop(probabilities.data)[0, 0], img.spacing_mm)


def sidecar_path(path: str) -> str:
    return path + '.json'


def save_model(path: str, model: UnetModel, optimizer=None, sidecar: dict = None) -> None:
    """ Writes the CKPT1 checkpoint (parameters, running statistics and
    optimizer velocities) and its JSON sidecar.

    :param path: checkpoint file
    :param model: model to store
    :param optimizer: optional SgdMomentum whose velocities are stored
    :param sidecar: extra JSON content (preprocessing, training state)
    """
    arrays = dict(model.state_arrays())

    if optimizer is not None:
        for name, velocity in optimizer.velocity.items():
            arrays[f'velocity.{name}'] = velocity

    write_ckpt1(path, arrays)

    document = dict(sidecar or {})
    document['format'] = 'CKPT1'
    document['unet'] = model.config.to_dict()
    txt.write_json(sidecar_path(path), document)


def load_model(path: str, optimizer=None) -> tuple:
    """ Reads a checkpoint written by `save_model`.

    :param path: checkpoint file
    :param optimizer: optional SgdMomentum to receive stored velocities
    :return: (UnetModel, sidecar dict)
    """
    sidecar = txt.read_json(sidecar_path(path))
    arrays = read_ckpt1(path)

    model = build(UnetConfig.from_dict(sidecar['unet']), seed=0)
    model.load_state_arrays(arrays)

    if optimizer is not None:
        optimizer.velocity = {name: _checked(arrays, f'velocity.{name}', p.data.shape).copy()
                              for name, p in model.parameters.items()}

    return model, sidecar
