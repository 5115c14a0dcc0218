import logging
import math

import numpy as np
from scipy import ndimage

from lesiondet.core.errors import EmptyMaskError, InvalidArgumentError
from lesiondet.core.imaging.image import BreastMask, Image


"""
    preprocess.py

    The three-step preprocessing applied to every raw image before it is
    seen by the network:

        1. energy band normalization inside the breast,
        2. Gaussian anti-alias filter and downscale to the working grid
           (0.2 mm by default),
        3. affine scaling of the in-breast range onto [0, 1].

    Every operation is a pure function of its inputs. Borders are handled
    by edge replication throughout.
"""

logger = logging.getLogger(__name__)

DEFAULT_BAND_SIGMAS_MM = (0.4, 0.8, 1.6, 3.2)
DEFAULT_TARGET_SPACING_MM = 0.2

MIN_BAND_STD = 1e-8
MASK_THRESHOLD_FRACTION = 0.05

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def kernel_radius(sigma_mm: float, spacing_mm: float) -> int:
    """ Radius in pixels of the truncated Gaussian kernel, ceil(3 sigma). """
    return max(1, math.ceil(3.0 * sigma_mm / spacing_mm - 1e-9))


def _blur(data: np.ndarray, sigma_mm: float, spacing_mm: float) -> np.ndarray:
    return ndimage.gaussian_filter(data, sigma=sigma_mm / spacing_mm, mode='nearest',
                                   radius=kernel_radius(sigma_mm, spacing_mm))


def gaussian_blur(img: Image, sigma_mm: float) -> Image:
    """ Separable Gaussian convolution with a kernel radius of
    ceil(3 sigma) pixels. The filter is evaluated in double precision.

    :param img: image to filter
    :param sigma_mm: standard deviation of the kernel in mm
    :return: filtered image with the same grid
    """
    if not sigma_mm > 0:
        raise InvalidArgumentError(f"Gaussian sigma must be positive, got {sigma_mm}.")

    return img.with_pixels(_blur(img.pixels.astype(np.float64), sigma_mm, img.spacing_mm))


def _output_size(length: int, spacing_mm: float, target_mm: float) -> int:
    return int(math.floor(length * spacing_mm / target_mm + 1e-6))


def _resample_array(data: np.ndarray, spacing_mm: float, target_mm: float) -> np.ndarray:
    factor = target_mm / spacing_mm
    out_h = _output_size(data.shape[0], spacing_mm, target_mm)
    out_w = _output_size(data.shape[1], spacing_mm, target_mm)

    if out_h < 1 or out_w < 1:
        raise InvalidArgumentError(f"Resampling a {data.shape} grid to {target_mm} mm leaves no pixels.")

    # Output pixel centres expressed in input index coordinates.
    rows = (np.arange(out_h) + 0.5) * factor - 0.5
    cols = (np.arange(out_w) + 0.5) * factor - 0.5
    grid = np.meshgrid(rows, cols, indexing='ij')

    return ndimage.map_coordinates(data.astype(np.float64), grid, order=1, mode='nearest')


def _same_spacing(spacing_mm: float, target_mm: float) -> bool:
    return abs(target_mm - spacing_mm) <= 1e-9 * max(spacing_mm, target_mm)


def resample_to_spacing(img: Image, target_mm: float) -> Image:
    """ Bilinear downscale onto a grid of floor(extent / target_mm)
    pixels per axis. The caller is responsible for the anti-alias filter
    (see `preprocess_image`).

    :param img: image to resample
    :param target_mm: output pixel spacing, not finer than the input
    :return: resampled image with spacing_mm == target_mm
    """
    if not target_mm > 0:
        raise InvalidArgumentError(f"Target spacing must be positive, got {target_mm}.")

    if _same_spacing(img.spacing_mm, target_mm):
        return img

    if target_mm < img.spacing_mm:
        raise InvalidArgumentError(f"Upscaling from {img.spacing_mm} mm to {target_mm} mm is not supported.")

    return Image(_resample_array(img.pixels, img.spacing_mm, target_mm), target_mm)


def resample_bits(bits: np.ndarray, spacing_mm: float, target_mm: float) -> np.ndarray:
    """ Resamples a boolean grid by interpolating its indicator and
    keeping pixels with coverage of at least one half.
    """
    bits = np.asarray(bits, dtype=bool)

    if _same_spacing(spacing_mm, target_mm):
        return bits.copy()

    return _resample_array(bits.astype(np.float64), spacing_mm, target_mm) >= 0.5


def resample_mask(mask: BreastMask, spacing_mm: float, target_mm: float) -> BreastMask:
    """ Brings a breast mask onto the grid produced by `resample_to_spacing`. """
    return BreastMask(resample_bits(mask.bits, spacing_mm, target_mm))


def _check_sigmas(sigmas_mm) -> tuple:
    sigmas = tuple(float(s) for s in sigmas_mm)

    if not sigmas:
        raise InvalidArgumentError("At least one band sigma is required.")

    if any(not s > 0 for s in sigmas):
        raise InvalidArgumentError(f"Band sigmas must be positive, got {sigmas}.")

    if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
        raise InvalidArgumentError(f"Band sigmas must be strictly increasing, got {sigmas}.")

    return sigmas


def band_decompose(img: Image, sigmas_mm=DEFAULT_BAND_SIGMAS_MM) -> list:
    """ Splits the image into difference-of-Gaussian bands plus the
    low-pass residual. The unfiltered image is the finest level, so the
    bands always sum back to the input.

    :param img: image to decompose
    :param sigmas_mm: strictly increasing blur scales in mm
    :return: list of float64 arrays, finest band first, residual last
    """
    sigmas = _check_sigmas(sigmas_mm)

    levels = [img.pixels.astype(np.float64)]
    levels += [_blur(levels[0], sigma, img.spacing_mm) for sigma in sigmas]

    bands = [fine - coarse for fine, coarse in zip(levels[:-1], levels[1:])]
    bands.append(levels[-1])

    return bands


def normalized_bands(img: Image, mask: BreastMask, sigmas_mm=DEFAULT_BAND_SIGMAS_MM) -> list:
    """ Returns each band of `band_decompose` divided by its standard
    deviation inside the mask. Bands whose in-mask deviation falls below
    1e-8 are returned untouched.
    """
    if mask.area_px == 0:
        raise InvalidArgumentError("Band normalization requires a non-empty breast mask.")

    mask.check_congruent(img)

    normalized = []
    for index, band in enumerate(band_decompose(img, sigmas_mm)):
        std = float(np.std(band[mask.bits]))

        if std < MIN_BAND_STD:
            logger.debug("Band %d is degenerate (std %.3g), left untouched.", index, std)
            normalized.append(band)
        else:
            normalized.append(band / std)

    return normalized


def band_normalize(img: Image, mask: BreastMask, sigmas_mm=DEFAULT_BAND_SIGMAS_MM) -> Image:
    """ Energy band normalization: every band of the decomposition gets
    unit energy inside the breast, then the bands are summed again. The
    result does not depend on the global gain of the input.

    :param img: raw image
    :param mask: breast region used to measure band energy
    :param sigmas_mm: strictly increasing blur scales in mm
    :return: normalized image with the same grid
    """
    return img.with_pixels(np.sum(normalized_bands(img, mask, sigmas_mm), axis=0))


def scale_to_unit(img: Image, mask: BreastMask = None) -> Image:
    """ Maps the in-mask minimum to 0 and the in-mask maximum to 1. Pixels
    outside the mask are clamped to [0, 1]; a constant image maps to zeros.

    :param img: image to scale
    :param mask: region defining the range, whole image if None
    :return: scaled image
    """
    data = img.pixels.astype(np.float64)
    inside = data if mask is None or mask.area_px == 0 else data[mask.bits]

    low, high = float(inside.min()), float(inside.max())

    if high - low <= 0:
        return img.with_pixels(np.zeros_like(data))

    return img.with_pixels(np.clip((data - low) / (high - low), 0.0, 1.0))


def largest_component(bits: np.ndarray) -> np.ndarray:
    """ Keeps the largest 8-connected component; ties go to the component
    met first in raster order.
    """
    labels, count = ndimage.label(bits, structure=EIGHT_CONNECTED)

    if count == 0:
        return np.zeros_like(bits, dtype=bool)

    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def estimate_breast_mask(img: Image) -> BreastMask:
    """ Thresholds the raw image at 5% of its maximum, keeps the largest
    8-connected component and fills its holes.

    :param img: raw (pre-normalization) intensity image
    :return: breast mask congruent with the image
    """
    peak = float(img.pixels.max())

    if not peak > 0:
        raise EmptyMaskError("Cannot estimate a breast mask on an image without positive intensities.")

    bits = largest_component(img.pixels > MASK_THRESHOLD_FRACTION * peak)
    bits = ndimage.binary_fill_holes(bits)

    return BreastMask(bits)


def preprocess_image(img: Image, target_spacing_mm: float = DEFAULT_TARGET_SPACING_MM,
                     band_sigmas_mm=DEFAULT_BAND_SIGMAS_MM, mask: BreastMask = None) -> tuple:
    """ Runs the full chain on a raw image.

    :param img: raw image at its native spacing
    :param target_spacing_mm: working grid spacing
    :param band_sigmas_mm: band normalization scales
    :param mask: breast mask on the raw grid, estimated if None
    :return: (preprocessed Image, BreastMask on the working grid)
    """
    if mask is None:
        mask = estimate_breast_mask(img)

    normalized = band_normalize(img, mask, band_sigmas_mm)

    if not _same_spacing(img.spacing_mm, target_spacing_mm):
        normalized = resample_to_spacing(gaussian_blur(normalized, 0.5 * target_spacing_mm), target_spacing_mm)
        mask = resample_mask(mask, img.spacing_mm, target_spacing_mm)

    return scale_to_unit(normalized, mask), mask
