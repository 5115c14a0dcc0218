import logging
import math
import os

import numpy as np
import pandas as pd

from lesiondet.autodiff import functional as F
from lesiondet.autodiff.optim import PlateauSchedule, SgdMomentum
from lesiondet.autodiff.tensor import no_grad
from lesiondet.core.errors import DataError, InvalidArgumentError
from lesiondet.core.utils.config import RunConfig
from lesiondet.dataset.prepare import load_training_images
from lesiondet.dataset.records import NORMAL
from lesiondet.dataset.sampling import augment_flip, batches, compose_epoch, materialize_sample, stack_batch
from lesiondet.dataset.split import TEST, TRAIN, VAL, SplitAssignment, split_exams
from lesiondet.models.unet import UnetConfig, build, load_model, pad_to_grid, save_model


"""
    train.py

    Patch-based training of the u-net.

    Every epoch draws its samples from numpy.random.default_rng([seed,
    epoch]), so a run resumed from the last checkpoint replays exactly the
    stream of an uninterrupted run. Validation uses one fixed sample set
    drawn from default_rng([seed, 0]). The checkpoint with the lowest
    validation loss is kept at the output path; the state after the most
    recent epoch is kept next to it with a `.last` suffix.
"""

logger = logging.getLogger(__name__)

LOG_COLUMNS = ['epoch', 'train_loss', 'val_loss', 'lr']
VALIDATION_STREAM = 0


def last_path(out_model: str) -> str:
    return out_model + '.last'


def log_path(out_model: str) -> str:
    return out_model + '.log.csv'


def split_path(out_model: str) -> str:
    return out_model + '.split.json'


def unet_config(config: RunConfig) -> UnetConfig:
    return UnetConfig(config.unet.depth, config.unet.base_filters)


def positives_of(images: list) -> list:
    """ (TrainingImage, lesion) pairs, one per annotated lesion. """
    return [(image, lesion) for image in images for lesion in image.lesions]


def normals_of(images: list) -> list:
    return [image for image in images if image.exam_label == NORMAL]


def batch_loss(model, pairs: list, negative_weight: float):
    """ Weighted logistic loss of one batch. Patches are padded to the
    model's grid and the logits are cropped back before the loss, so the
    padding never counts as background.
    """
    x, targets = stack_batch(pairs)
    padded, record = pad_to_grid(x, model.config.multiple)
    logits = record.crop(model.forward_logits(padded))
    return F.weighted_logistic_loss(logits, targets, negative_weight)


def run_epoch(model, optimizer: SgdMomentum, samples: list, config: RunConfig, rng: np.random.Generator) -> float:
    """ One pass of SGD over the epoch's samples.

    :return: mean batch loss
    """
    training = config.training
    model.train()
    losses = []

    for chunk in batches(samples, training.batch_size):
        pairs = [materialize_sample(s, training.patch_px) for s in chunk]
        if training.augment:
            pairs = [augment_flip(patch, target, rng) for patch, target in pairs]

        model.zero_grad()
        loss = batch_loss(model, pairs, training.negative_weight)
        loss.backward()
        optimizer.step(model.named_parameters())
        losses.append(loss.item())

    return float(np.mean(losses))


def validation_pairs(images: list, config: RunConfig) -> list:
    """ Fixed validation patches, or an empty list when the validation
    images lack either lesions or normal exams.
    """
    positives, normals = positives_of(images), normals_of(images)

    if not positives or not normals:
        return []

    rng = np.random.default_rng([config.seed, VALIDATION_STREAM])
    return [materialize_sample(s, config.training.patch_px) for s in compose_epoch(positives, normals, rng)]


def evaluate_loss(model, pairs: list, config: RunConfig) -> float:
    """ Mean batch loss in evaluation mode, without touching the running
    statistics.
    """
    previous = model.mode
    model.eval()
    try:
        with no_grad():
            losses = [batch_loss(model, chunk, config.training.negative_weight).item()
                      for chunk in batches(pairs, config.training.batch_size)]
    finally:
        model.mode = previous

    return float(np.mean(losses))


def _check_training_split(positives: list, normals: list) -> None:
    if not positives:
        raise DataError("The training split holds no malignant exam with an annotated lesion.")

    if not normals:
        raise DataError("The training split holds no normal exam to draw negative patches from.")


def _sidecar(config: RunConfig, epoch: int, schedule: PlateauSchedule, best_val_loss: float,
             history: list, out_model: str) -> dict:
    return {
        'seed': config.seed,
        'preprocessing': {'target_spacing_mm': config.preprocessing.target_spacing_mm,
                          'band_sigmas_mm': list(config.preprocessing.band_sigmas_mm)},
        'split_path': os.path.basename(split_path(out_model)),
        'training_state': {
            'epoch': epoch,
            'schedule': schedule.state_dict(),
            'best_val_loss': None if math.isinf(best_val_loss) else best_val_loss,
            'history': history,
        },
    }


def write_log(path: str, history: list) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame(history, columns=LOG_COLUMNS).to_csv(path, index=False)


def resolve_split(exams: list, config: RunConfig, out_model: str, resume: bool) -> SplitAssignment:
    """ Reuses the stored split when resuming, otherwise splits afresh and
    stores the assignment next to the model.
    """
    path = split_path(out_model)

    if resume and os.path.exists(path):
        return SplitAssignment.load(path)

    split = split_exams(exams, config.seed)
    split.save(path)
    return split


def train(exams: list, config: RunConfig, out_model: str, resume: bool = False) -> pd.DataFrame:
    """ Trains a u-net on the train split of the given exams.

    :param exams: ExamRecords of the whole dataset
    :param config: run configuration
    :param out_model: path of the best checkpoint
    :param resume: continue from `<out_model>.last`
    :return: training log (epoch, train_loss, val_loss, lr)
    """
    split = resolve_split(exams, config, out_model, resume)
    prep = config.preprocessing

    train_images = load_training_images(split.select(exams, TRAIN), prep.target_spacing_mm, prep.band_sigmas_mm,
                                        config.threads)
    val_images = load_training_images(split.select(exams, VAL), prep.target_spacing_mm, prep.band_sigmas_mm,
                                      config.threads)
    logger.info("Training on %d images, validating on %d; %d test exams held out.",
                len(train_images), len(val_images), len(split.exam_ids(TEST)))

    positives, normals = positives_of(train_images), normals_of(train_images)
    _check_training_split(positives, normals)

    val_pairs = validation_pairs(val_images, config)
    if not val_pairs:
        logger.warning("Validation split lacks lesions or normal exams; the training loss drives the schedule.")

    optimizer = SgdMomentum(config.training.learning_rate, config.training.momentum)

    if resume:
        if not os.path.exists(last_path(out_model)):
            raise InvalidArgumentError(f"Nothing to resume: {last_path(out_model)} does not exist.")

        model, sidecar = load_model(last_path(out_model), optimizer)
        if model.config != unet_config(config):
            raise InvalidArgumentError(f"Checkpoint architecture {model.config} differs from the configured "
                                       f"{unet_config(config)}.")

        state = sidecar['training_state']
        schedule = PlateauSchedule.from_state_dict(state['schedule'])
        best_val_loss = math.inf if state['best_val_loss'] is None else float(state['best_val_loss'])
        history = [list(row) for row in state['history']]
        start = int(state['epoch']) + 1
        logger.info("Resuming after epoch %d at learning rate %g.", start - 1, schedule.learning_rate)
    else:
        model = build(unet_config(config), config.seed)
        optimizer.register({name: p.data for name, p in model.named_parameters().items()})
        schedule = PlateauSchedule(config.training.learning_rate, config.training.lr_factor,
                                   config.training.patience, config.training.plateau_threshold)
        best_val_loss = math.inf
        history = []
        start = 1

    for epoch in range(start, config.training.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        optimizer.learning_rate = schedule.learning_rate
        lr = schedule.learning_rate

        samples = compose_epoch(positives, normals, rng)
        train_loss = run_epoch(model, optimizer, samples, config, rng)
        val_loss = evaluate_loss(model, val_pairs, config) if val_pairs else train_loss

        history.append([epoch, train_loss, val_loss, lr])
        logger.info("Epoch %d: train loss %.6f, val loss %.6f, lr %g.", epoch, train_loss, val_loss, lr)

        schedule.update(val_loss)

        if val_loss < best_val_loss:
            best_val_loss = val_loss
            save_model(out_model, model, optimizer,
                       _sidecar(config, epoch, schedule, best_val_loss, history, out_model))
            logger.info("Validation loss improved; wrote %s.", out_model)

        save_model(last_path(out_model), model, optimizer,
                   _sidecar(config, epoch, schedule, best_val_loss, history, out_model))
        write_log(log_path(out_model), history)

    if not os.path.exists(out_model):
        # Every validation loss was NaN.
        save_model(out_model, model, optimizer,
                   _sidecar(config, config.training.max_epochs, schedule, best_val_loss, history, out_model))

    return pd.DataFrame(history, columns=LOG_COLUMNS)
