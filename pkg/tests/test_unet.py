import numpy as np
import pytest

from lesiondet.autodiff import functional as F
from lesiondet.autodiff.optim import SgdMomentum
from lesiondet.autodiff.tensor import Tensor, no_grad
from lesiondet.core.errors import InvalidArgumentError, ShapeError
from lesiondet.core.imaging.image import Image
from lesiondet.models.unet import (FULL_SIZE_CONFIG, EVAL, TRAIN, UnetConfig, build, infer_full_image, load_model,
                                   pad_to_grid, save_model, sidecar_path)


def expected_parameter_count(depth: int, base: int) -> int:
    def block(c_in, c_out):
        return (9 * c_in * c_out + c_out) + (9 * c_out * c_out + c_out) + 4 * c_out

    channels = [base * 2 ** level for level in range(depth + 1)]
    total = block(1, channels[0])
    total += sum(block(channels[level - 1], channels[level]) for level in range(1, depth + 1))
    total += sum(4 * channels[level + 1] * channels[level] + block(2 * channels[level], channels[level])
                 for level in range(depth))
    return total + channels[0] + 1


@pytest.mark.parametrize('depth,base', [(1, 2), (2, 4), (3, 8)])
def test_parameter_count(depth, base):
    assert build(UnetConfig(depth, base), seed=0).parameter_count() == expected_parameter_count(depth, base)


def test_parameter_count_by_hand():
    # enc0 66, bottleneck 240, up 32, dec0 120, head 3
    assert build(UnetConfig(1, 2), seed=0).parameter_count() == 461


def test_build_is_deterministic():
    a = build(UnetConfig(2, 4), seed=3)
    b = build(UnetConfig(2, 4), seed=3)
    c = build(UnetConfig(2, 4), seed=4)

    assert list(a.named_parameters()) == list(b.named_parameters())
    for name, p in a.named_parameters().items():
        assert p.data.tobytes() == b.named_parameters()[name].data.tobytes()

    assert any(p.data.tobytes() != c.named_parameters()[name].data.tobytes()
               for name, p in a.named_parameters().items())


def test_initialization_bounds():
    model = build(UnetConfig(2, 4), seed=0)
    params = model.named_parameters()

    bound = np.sqrt(6 / (4 * 9))
    assert np.abs(params['enc1.conv1.weight'].data).max() <= bound * (1 + 1e-6)
    assert np.all(params['enc0.conv1.bias'].data == 0)
    assert np.all(params['enc0.bn1.gamma'].data == 1)
    assert params['dec0.up.weight'].shape == (8, 4, 2, 2)
    assert params['head.weight'].shape == (1, 4, 1, 1)


def test_invalid_config():
    with pytest.raises(InvalidArgumentError):
        UnetConfig(0, 8)


@pytest.mark.parametrize('shape', [(344, 344), (512, 408), (100, 90)])
def test_full_image_map_has_input_size(shape, rng):
    model = build(UnetConfig(3, 2), seed=1)
    img = Image(rng.random(shape), 0.2)

    prob_map = infer_full_image(model, img)

    assert prob_map.shape == shape
    assert prob_map.spacing_mm == 0.2
    assert prob_map.values.min() >= 0.0 and prob_map.values.max() <= 1.0


def test_full_size_config_forward_shape(rng):
    assert (FULL_SIZE_CONFIG.depth, FULL_SIZE_CONFIG.base_filters) == (4, 128)
    model = build(FULL_SIZE_CONFIG, seed=0).eval()

    with no_grad():
        out = model.forward(Tensor(rng.random((1, 1, 64, 64)).astype(np.float32)))

    assert out.shape == (1, 1, 64, 64)


def test_forward_rejects_off_grid_input():
    model = build(UnetConfig(2, 2), seed=0)

    with pytest.raises(ShapeError, match='multiple of 4'):
        model.forward(Tensor(np.zeros((1, 1, 6, 8))))

    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((1, 2, 8, 8))))


def test_inference_leaves_model_untouched(rng):
    model = build(UnetConfig(2, 2), seed=1)
    img = Image(rng.random((32, 32)), 0.2)
    before = {name: value.copy() for name, value in model.state_arrays().items()}

    first = infer_full_image(model, img)
    second = infer_full_image(model, img)

    assert model.mode == TRAIN
    assert first.values.tobytes() == second.values.tobytes()
    for name, value in model.state_arrays().items():
        assert value.tobytes() == before[name].tobytes()


def test_training_forward_updates_running_statistics(rng):
    model = build(UnetConfig(1, 2), seed=1)
    model.forward(Tensor(rng.random((2, 1, 8, 8)).astype(np.float32)))

    assert not np.all(model.buffers['enc0.bn1'].running_mean == 0)


def test_gradient_step_reduces_loss(rng):
    model = build(UnetConfig(2, 2), seed=5)
    for p in model.named_parameters().values():
        p.data = p.data.astype(np.float64)

    x = Tensor(rng.random((2, 1, 16, 16)))
    target = np.zeros((2, 1, 16, 16))
    target[:, :, 4:10, 5:11] = 1.0

    optimizer = SgdMomentum(learning_rate=1e-3, momentum=0.0)
    optimizer.register({name: p.data for name, p in model.named_parameters().items()})

    loss = F.weighted_logistic_loss(model.forward_logits(x), target)
    loss.backward()
    optimizer.step(model.named_parameters())

    with no_grad():
        after = F.weighted_logistic_loss(model.forward_logits(x), target)

    assert after.item() < loss.item()


def test_pad_and_crop():
    x = np.arange(35.0).reshape(1, 1, 5, 7)
    padded, record = pad_to_grid(x, 4)

    assert padded.shape == (1, 1, 8, 8)
    assert np.all(padded[..., 5:, :] == 0) and np.all(padded[..., :, 7:] == 0)
    np.testing.assert_array_equal(record.crop(padded), x)

    same, _ = pad_to_grid(np.zeros((1, 1, 8, 8)), 4)
    assert same.shape == (1, 1, 8, 8)

    with pytest.raises(InvalidArgumentError):
        pad_to_grid(x, 0)


def test_zero_image_gives_uniform_map():
    model = build(UnetConfig(3, 2), seed=4)
    prob_map = infer_full_image(model, Image(np.zeros((100, 90)), 0.2))

    # Zero biases and shifts keep every activation at zero.
    assert prob_map.shape == (100, 90)
    assert np.all(prob_map.values == 0.5)


def test_zero_image_matches_its_padded_version(rng):
    model = build(UnetConfig(3, 2), seed=4)
    for name, parameter in model.named_parameters().items():
        if name.endswith(('.bias', '.beta')):
            parameter.data[...] = rng.uniform(-0.5, 0.5, parameter.shape)

    small = infer_full_image(model, Image(np.zeros((100, 90)), 0.2))
    padded = infer_full_image(model, Image(np.zeros((104, 96)), 0.2))

    assert small.shape == (100, 90)
    np.testing.assert_array_equal(small.values, padded.values[:100, :90])


def test_crop_of_tensor_keeps_gradient_path():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    padded, record = pad_to_grid(x, 8)
    record.crop(x).backward()

    assert padded.shape == (1, 1, 8, 8)
    np.testing.assert_array_equal(x.grad, 1.0)


def test_checkpoint_restores_model(tmp_path, rng):
    model = build(UnetConfig(2, 2), seed=2)
    model.forward(Tensor(rng.random((2, 1, 8, 8)).astype(np.float32)))

    optimizer = SgdMomentum()
    optimizer.register({name: p.data for name, p in model.named_parameters().items()})
    for velocity in optimizer.velocity.values():
        velocity += 0.5

    path = str(tmp_path / 'model.ckpt')
    save_model(path, model, optimizer, {'seed': 2})

    restored_optimizer = SgdMomentum()
    restored, sidecar = load_model(path, restored_optimizer)

    assert restored.config == model.config
    assert sidecar['seed'] == 2
    assert sidecar['format'] == 'CKPT1'
    assert sidecar_path(path).endswith('.json')

    for name, value in model.state_arrays().items():
        assert restored.state_arrays()[name].tobytes() == value.tobytes()

    for name, velocity in optimizer.velocity.items():
        np.testing.assert_array_equal(restored_optimizer.velocity[name], velocity)

    img = Image(rng.random((16, 16)), 0.2)
    assert infer_full_image(restored, img).values.tobytes() == infer_full_image(model, img).values.tobytes()


def test_mode_switch():
    model = build(UnetConfig(1, 2), seed=0)

    assert model.eval().mode == EVAL
    assert model.train().mode == TRAIN
