import logging
import math

import numpy as np

from lesiondet.autodiff.tensor import Tensor
from lesiondet.core.errors import DataError, EmptyMaskError, InvalidArgumentError, ShapeError
from lesiondet.core.imaging.image import BreastMask, Image
from lesiondet.dataset.records import NORMAL


"""
    sampling.py

    Patch sampling for training. Positive patches are centred on a
    lesion's centre of mass; negative patches are centred on a pixel
    drawn uniformly from the breast of a normal exam's image. Windows
    reaching outside the image are zero-filled in both patch and target.

    Each epoch presents every positive once together with the same
    number of freshly drawn negatives, in shuffled order.
"""

logger = logging.getLogger(__name__)

DEFAULT_PATCH_PX = 344
POSITIVE, NEGATIVE = 'positive', 'negative'


class TrainingImage:
    def __init__(self, image_id: str, image: Image, mask: BreastMask, lesions: list, exam_label: str):
        """
        :param image_id: identifier
        :param image: preprocessed image on the working grid
        :param mask: breast mask on the same grid
        :param lesions: LesionAnnotations whose masks are on the same grid
        :param exam_label: label of the exam the image belongs to
        """
        mask.check_congruent(image)
        for lesion in lesions:
            if lesion.load_mask().shape != image.shape:
                raise ShapeError(f"Lesion {lesion.id} mask {lesion.mask.shape} does not match image {image.shape}.")

        self.image_id = image_id
        self.image: Image = image
        self.mask: BreastMask = mask
        self.lesions: list = lesions
        self.exam_label: str = exam_label

        self.lesion_union = np.zeros(image.shape, dtype=bool)
        for lesion in lesions:
            self.lesion_union |= lesion.mask

    def __repr__(self):
        return f"TrainingImage({self.image_id}, {len(self.lesions)} lesion(s), {self.exam_label})"


class EpochSample:
    def __init__(self, kind: str, source: TrainingImage, center: tuple, lesion_id: str = None):
        """
        :param kind: 'positive' or 'negative'
        :param source: image the patch is cut from
        :param center: (row, col) of the patch centre
        :param lesion_id: lesion of a positive sample
        """
        self.kind = kind
        self.source = source
        self.center = center
        self.lesion_id = lesion_id

    def key(self) -> tuple:
        return self.kind, self.source.image_id, self.center, self.lesion_id

    def __repr__(self):
        return f"EpochSample({self.kind}, {self.source.image_id}, center={self.center})"


def extract_window(array: np.ndarray, center: tuple, size: int) -> np.ndarray:
    """ size x size window whose centre pixel is `center`; rows run from
    center - size // 2 to center - size // 2 + size - 1. Parts outside the
    array are zero.
    """
    out = np.zeros((size, size), dtype=array.dtype)
    top, left = center[0] - size // 2, center[1] - size // 2

    r0, r1 = max(top, 0), min(top + size, array.shape[0])
    c0, c1 = max(left, 0), min(left + size, array.shape[1])

    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = array[r0:r1, c0:c1]

    return out


def lesion_center_pixel(lesion, spacing_mm: float) -> tuple:
    """ Centre of mass rounded to the nearest (row, col). """
    x, y = lesion.center_of_mass_mm
    return int(math.floor(y / spacing_mm + 0.5)), int(math.floor(x / spacing_mm + 0.5))


def sample_positive_patch(img: Image, lesion, patch_px: int = DEFAULT_PATCH_PX, lesion_union: np.ndarray = None) -> tuple:
    """ Patch centred on a lesion.

    :param img: preprocessed image
    :param lesion: LesionAnnotation on the image grid
    :param patch_px: patch side
    :param lesion_union: all lesion pixels of the image, defaults to this lesion's mask
    :return: (float32 patch, float32 target)
    """
    if patch_px < 1:
        raise InvalidArgumentError(f"Patch size must be positive, got {patch_px}.")

    union = lesion.load_mask() if lesion_union is None else lesion_union
    center = lesion_center_pixel(lesion, img.spacing_mm)

    patch = extract_window(img.pixels, center, patch_px)
    target = extract_window(union, center, patch_px).astype(np.float32)
    return patch, target


def draw_breast_pixel(mask: BreastMask, rng: np.random.Generator) -> tuple:
    """ (row, col) drawn uniformly from the mask pixels. """
    if mask.area_px == 0:
        raise EmptyMaskError("Cannot draw a negative patch from an empty breast mask.")

    flat = np.flatnonzero(mask.bits)
    index = int(flat[rng.integers(len(flat))])
    return divmod(index, mask.shape[1])


def sample_negative_patch(img: Image, mask: BreastMask, rng: np.random.Generator, patch_px: int = DEFAULT_PATCH_PX,
                          exam_label: str = NORMAL) -> tuple:
    """ Patch centred on a random breast pixel of a normal exam's image.

    :param img: preprocessed image
    :param mask: breast mask on the image grid
    :param rng: random generator
    :param patch_px: patch side
    :param exam_label: label of the image's exam; only normal exams qualify
    :return: (float32 patch, all-zero float32 target)
    """
    if exam_label != NORMAL:
        raise DataError(f"Negative patches come from normal exams only, got a {exam_label} exam.")

    center = draw_breast_pixel(mask, rng)
    return extract_window(img.pixels, center, patch_px), np.zeros((patch_px, patch_px), dtype=np.float32)


def compose_epoch(positives: list, normals: list, rng: np.random.Generator) -> list:
    """ One epoch: every positive once plus as many fresh negatives,
    shuffled.

    :param positives: (TrainingImage, LesionAnnotation) pairs
    :param normals: TrainingImages of normal exams
    :param rng: random generator of the epoch
    :return: list of EpochSample
    """
    if not positives:
        raise DataError("An epoch needs at least one positive sample.")

    if not normals:
        raise DataError("An epoch needs at least one normal image for negative sampling.")

    for source in normals:
        if source.exam_label != NORMAL:
            raise DataError(f"Image {source.image_id} belongs to a {source.exam_label} exam.")

    samples = [EpochSample(POSITIVE, source, lesion_center_pixel(lesion, source.image.spacing_mm), lesion.id)
               for source, lesion in positives]

    for _ in range(len(positives)):
        source = normals[int(rng.integers(len(normals)))]
        samples.append(EpochSample(NEGATIVE, source, draw_breast_pixel(source.mask, rng)))

    return [samples[i] for i in rng.permutation(len(samples))]


def materialize_sample(sample: EpochSample, patch_px: int = DEFAULT_PATCH_PX) -> tuple:
    """ Cuts the (patch, target) pair described by an epoch sample. """
    patch = extract_window(sample.source.image.pixels, sample.center, patch_px)

    if sample.kind == NEGATIVE:
        return patch, np.zeros((patch_px, patch_px), dtype=np.float32)

    return patch, extract_window(sample.source.lesion_union, sample.center, patch_px).astype(np.float32)


def augment_flip(patch: np.ndarray, target: np.ndarray, rng: np.random.Generator) -> tuple:
    """ Independent 50% up-down and 50% left-right flips applied to patch
    and target alike.
    """
    if patch.shape != target.shape:
        raise ShapeError(f"Patch {patch.shape} and target {target.shape} are not congruent.")

    if rng.random() < 0.5:
        patch, target = patch[::-1, :], target[::-1, :]

    if rng.random() < 0.5:
        patch, target = patch[:, ::-1], target[:, ::-1]

    return np.ascontiguousarray(patch), np.ascontiguousarray(target)


def batches(samples: list, batch_size: int) -> list:
    """ Consecutive chunks of at most batch_size samples. """
    if batch_size < 1:
        raise InvalidArgumentError(f"Batch size must be positive, got {batch_size}.")

    return [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]


def stack_batch(pairs: list) -> tuple:
    """ Stacks (patch, target) pairs into an input Tensor and a target
    array, both (N, 1, H, W) float32.
    """
    patches = np.stack([p for p, _ in pairs])[:, None].astype(np.float32)
    targets = np.stack([t for _, t in pairs])[:, None].astype(np.float32)
    return Tensor(patches), targets
