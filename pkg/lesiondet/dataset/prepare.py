import logging
from concurrent.futures import ThreadPoolExecutor

from lesiondet.core.errors import DataError
from lesiondet.core.imaging.image import BreastMask
from lesiondet.core.imaging.preprocess import estimate_breast_mask, preprocess_image, resample_bits
from lesiondet.core.io.images import read_image, read_mask
from lesiondet.dataset.records import LesionAnnotation
from lesiondet.dataset.sampling import TrainingImage


"""
    prepare.py

    Brings manifest records onto the working grid. Records flagged as
    preprocessed are read as they are (their spacing must be the working
    spacing); raw records run through the preprocessing chain and their
    lesion masks are resampled alongside.
"""

logger = logging.getLogger(__name__)


def _same(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-9 * max(abs(a), abs(b))


def prepare_record(record, target_spacing_mm: float, band_sigmas_mm) -> tuple:
    """ Working-grid image, breast mask and lesions of one record.

    :param record: ImageRecord
    :param target_spacing_mm: working spacing
    :param band_sigmas_mm: band normalization scales
    :return: (Image, BreastMask, list of LesionAnnotation on the working grid)
    """
    img = read_image(record.path, record.spacing_mm)

    if record.preprocessed:
        if not _same(img.spacing_mm, target_spacing_mm):
            raise DataError(f"Image {record.image_id} was preprocessed at {img.spacing_mm} mm, "
                            f"expected {target_spacing_mm} mm.")

        mask = BreastMask(read_mask(record.mask_path)) if record.mask_path else estimate_breast_mask(img)
        lesions = record.lesions
    else:
        source_spacing = img.spacing_mm
        img, mask = preprocess_image(img, target_spacing_mm, band_sigmas_mm)
        lesions = [LesionAnnotation(lesion.id, target_spacing_mm,
                                    mask=resample_bits(lesion.load_mask(), source_spacing, target_spacing_mm))
                   for lesion in record.lesions]

    mask.check_congruent(img)
    logger.debug("Prepared %s: %dx%d, %d lesion(s).", record.image_id, img.height, img.width, len(lesions))
    return img, mask, lesions


def prepare_records(records: list, target_spacing_mm: float, band_sigmas_mm, threads: int = 1) -> list:
    """ `prepare_record` over many records, results in input order. """
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: prepare_record(r, target_spacing_mm, band_sigmas_mm), records))


def load_training_images(exams: list, target_spacing_mm: float, band_sigmas_mm, threads: int = 1) -> list:
    """ TrainingImages for every image of the given exams.

    :param exams: ExamRecords
    :param target_spacing_mm: working spacing
    :param band_sigmas_mm: band normalization scales
    :param threads: worker threads
    :return: list of TrainingImage in exam order
    """
    pairs = [(exam, record) for exam in exams for record in exam.images]
    prepared = prepare_records([record for _, record in pairs], target_spacing_mm, band_sigmas_mm, threads)

    return [TrainingImage(record.image_id, img, mask, lesions, exam.label)
            for (exam, record), (img, mask, lesions) in zip(pairs, prepared)]
