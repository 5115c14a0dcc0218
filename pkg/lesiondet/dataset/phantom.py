import logging
import os

import numpy as np
from scipy import ndimage

from lesiondet.core.errors import InvalidArgumentError
from lesiondet.core.imaging.image import Image
from lesiondet.core.io.images import write_f32i, write_mask
from lesiondet.dataset.records import LATERALITIES, VIEWS, ExamRecord, ImageRecord, LesionAnnotation


"""
    phantom.py

    Synthetic mammography-like exams with known ground truth.

    The breast is a half ellipse resting on the chest wall (left image
    edge for a right breast, right edge for a left breast). Its intensity
    follows a thickness profile 0.4 + 0.6 * sqrt(1 - rho^2), modulated by
    a vertical intensity gradient and band-limited texture. Lesions are
    rotated, near-isotropic elliptic blobs added on top; their masks are
    exactly the pixels inside the ellipse.

    A malignant exam carries its lesions in every view of one breast, as
    a real lesion is seen in both the CC and MLO projection.
"""

logger = logging.getLogger(__name__)

PLACEMENT_ATTEMPTS = 200


class PhantomSpec:
    def __init__(self, height: int = 512, width: int = 512, spacing_mm: float = 0.2,
                 diameter_mm: tuple = (6.0, 40.0), aspect: tuple = (1.0, 1.2), contrast: tuple = (0.15, 0.3),
                 lesions_per_exam: tuple = (1, 3), texture_sigma_mm: float = 1.5, texture_amplitude: float = 0.04,
                 gradient: float = 0.2, breast_extent: tuple = (0.46, 0.8)):
        """
        :param height: image rows
        :param width: image columns
        :param spacing_mm: pixel spacing
        :param diameter_mm: (min, max) lesion diameter
        :param aspect: (min, max) ratio of the long to the short lesion axis
        :param contrast: (min, max) peak intensity added by a lesion
        :param lesions_per_exam: (min, max) lesions planted per view of a malignant exam
        :param texture_sigma_mm: correlation length of the background texture
        :param texture_amplitude: standard deviation of the texture
        :param gradient: relative intensity change from top to bottom row
        :param breast_extent: breast semi-axes as fractions of (height, width)
        """
        if height < 8 or width < 8:
            raise InvalidArgumentError(f"Phantom of {height}x{width} pixels is too small.")

        if spacing_mm <= 0:
            raise InvalidArgumentError(f"Spacing must be positive, got {spacing_mm}.")

        for name, (low, high) in (('diameter_mm', diameter_mm), ('aspect', aspect), ('contrast', contrast),
                                  ('lesions_per_exam', lesions_per_exam)):
            if low <= 0 or high < low:
                raise InvalidArgumentError(f"Invalid {name} range ({low}, {high}).")

        self.height = int(height)
        self.width = int(width)
        self.spacing_mm = float(spacing_mm)
        self.diameter_mm = tuple(float(v) for v in diameter_mm)
        self.aspect = tuple(float(v) for v in aspect)
        self.contrast = tuple(float(v) for v in contrast)
        self.lesions_per_exam = tuple(int(v) for v in lesions_per_exam)
        self.texture_sigma_mm = float(texture_sigma_mm)
        self.texture_amplitude = float(texture_amplitude)
        self.gradient = float(gradient)
        self.breast_extent = tuple(float(v) for v in breast_extent)

    def to_dict(self) -> dict:
        return dict(vars(self))

    @classmethod
    def from_dict(cls, values: dict) -> 'PhantomSpec':
        return cls(**values)


class PlantedLesion:
    def __init__(self, center_px: tuple, semi_axes_px: tuple, angle: float, contrast: float):
        """
        :param center_px: (row, col) of the blob centre
        :param semi_axes_px: (a, b) semi-axes in pixels
        :param angle: rotation of the first axis from the column axis, radians
        :param contrast: peak added intensity
        """
        self.center_px = center_px
        self.semi_axes_px = semi_axes_px
        self.angle = angle
        self.contrast = contrast

    def radius2(self, shape: tuple) -> np.ndarray:
        """ Normalized squared elliptic radius at every pixel. """
        rows, cols = np.indices(shape, dtype=np.float64)
        dy, dx = rows - self.center_px[0], cols - self.center_px[1]
        c, s = np.cos(self.angle), np.sin(self.angle)
        u, v = dx * c + dy * s, -dx * s + dy * c
        return (u / self.semi_axes_px[0]) ** 2 + (v / self.semi_axes_px[1]) ** 2

    @property
    def bounding_radius_px(self) -> float:
        return max(self.semi_axes_px)


def breast_support(spec: PhantomSpec, laterality: str) -> tuple:
    """ Half-ellipse breast region and its normalized radius.

    :return: (boolean support, rho) where rho is 0 at the chest wall centre and 1 on the skin line
    """
    rows, cols = np.indices((spec.height, spec.width), dtype=np.float64)
    semi_rows = spec.breast_extent[0] * spec.height
    semi_cols = spec.breast_extent[1] * spec.width

    depth = cols if laterality == 'R' else (spec.width - 1) - cols
    rho = np.sqrt(((rows - (spec.height - 1) / 2) / semi_rows) ** 2 + (depth / semi_cols) ** 2)
    return rho < 1.0, rho


def render_background(spec: PhantomSpec, laterality: str, rng: np.random.Generator) -> tuple:
    """ Breast tissue without lesions.

    :return: (float64 pixels, boolean support)
    """
    support, rho = breast_support(spec, laterality)
    profile = 0.4 + 0.6 * np.sqrt(np.clip(1.0 - rho ** 2, 0.0, 1.0))

    ramp = np.linspace(1.0 + spec.gradient / 2, 1.0 - spec.gradient / 2, spec.height)[:, None]

    noise = ndimage.gaussian_filter(rng.standard_normal((spec.height, spec.width)),
                                    spec.texture_sigma_mm / spec.spacing_mm, mode='reflect')
    noise *= spec.texture_amplitude / max(float(noise.std()), 1e-12)

    pixels = np.where(support, profile * ramp + noise, 0.0)
    return np.clip(pixels, 0.0, None), support


def _draw_lesion(spec: PhantomSpec, rng: np.random.Generator) -> tuple:
    diameter = rng.uniform(*spec.diameter_mm)
    aspect = rng.uniform(*spec.aspect)
    a = diameter / 2 / spec.spacing_mm
    return (a, a / aspect), rng.uniform(0.0, np.pi), rng.uniform(*spec.contrast)


def place_lesions(spec: PhantomSpec, support: np.ndarray, count: int, rng: np.random.Generator) -> list:
    """ Places non-overlapping lesions entirely inside the breast.

    :param spec: generator parameters
    :param support: breast region
    :param count: number of lesions wanted
    :param rng: random generator
    :return: list of PlantedLesion, possibly shorter than count when the breast is full
    """
    # Distance to the skin line or image border bounds the blob radius at each centre.
    inner = ndimage.distance_transform_edt(np.pad(support, 1))[1:-1, 1:-1]
    placed = []

    for _ in range(count):
        semi_axes, angle, contrast = _draw_lesion(spec, rng)
        reach = max(semi_axes)
        candidates = np.flatnonzero(inner > reach + 1)

        for _ in range(PLACEMENT_ATTEMPTS if len(candidates) else 0):
            row, col = divmod(int(candidates[rng.integers(len(candidates))]), spec.width)
            clear = all(np.hypot(row - p.center_px[0], col - p.center_px[1]) > reach + p.bounding_radius_px + 2
                        for p in placed)
            if clear:
                placed.append(PlantedLesion((row, col), semi_axes, angle, contrast))
                break
        else:
            logger.debug("No room for a lesion of %.1f mm.", 2 * reach * spec.spacing_mm)

    return placed


def render_phantom_image(spec: PhantomSpec, laterality: str, lesion_count: int, rng: np.random.Generator) -> tuple:
    """ Renders one view.

    :param spec: generator parameters
    :param laterality: 'L' or 'R'
    :param lesion_count: lesions to plant
    :param rng: random generator
    :return: (Image, breast support, list of boolean lesion masks)
    """
    pixels, support = render_background(spec, laterality, rng)
    masks = []

    for lesion in place_lesions(spec, support, lesion_count, rng):
        r2 = lesion.radius2(pixels.shape)
        pixels += lesion.contrast * np.sqrt(np.clip(1.0 - r2, 0.0, None))
        masks.append(r2 <= 1.0)

    return Image(pixels, spec.spacing_mm), support, masks


def _exam_layout(rng: np.random.Generator) -> list:
    """ (laterality, view) pairs of an exam, 1 to 4 images. """
    lateralities = [LATERALITIES[i] for i in sorted(rng.choice(2, size=int(rng.integers(1, 3)), replace=False))]
    layout = []

    for laterality in lateralities:
        views = VIEWS if rng.random() < 0.8 else (VIEWS[int(rng.integers(2))],)
        layout.extend((laterality, view) for view in views)

    return layout


def generate_phantom_exam(rng: np.random.Generator, spec: PhantomSpec, exam_id: str, out_dir: str,
                          malignant: bool) -> ExamRecord:
    """ Renders an exam and writes its images and lesion masks.

    Images go to <out_dir>/images/<image_id>.f32i and lesion masks to
    <out_dir>/masks/<lesion_id>.pgm.

    :param rng: random generator
    :param spec: generator parameters
    :param exam_id: exam identifier
    :param out_dir: dataset directory
    :param malignant: plant lesions in one breast
    :return: ExamRecord with absolute paths
    """
    layout = _exam_layout(rng)
    affected = layout[int(rng.integers(len(layout)))][0] if malignant else None
    count = int(rng.integers(spec.lesions_per_exam[0], spec.lesions_per_exam[1] + 1)) if malignant else 0

    images = []
    for laterality, view in layout:
        wanted = count if laterality == affected else 0
        img, _, masks = render_phantom_image(spec, laterality, wanted, rng)

        image_id = f'{exam_id}_{laterality}_{view}'
        path = os.path.join(out_dir, 'images', f'{image_id}.f32i')
        write_f32i(path, img)

        lesions = []
        for index, bits in enumerate(masks):
            lesion_id = f'{image_id}_les{index}'
            mask_path = os.path.join(out_dir, 'masks', f'{lesion_id}.pgm')
            write_mask(mask_path, bits)
            lesions.append(LesionAnnotation(lesion_id, spec.spacing_mm, mask=bits, mask_path=mask_path))

        images.append(ImageRecord(exam_id, path, view, laterality, lesions, image_id, spec.spacing_mm))

    # A crowded breast may reject every lesion; keep the label honest.
    if malignant and all(image.is_normal for image in images):
        logger.warning("Exam %s received no lesion and is recorded as normal.", exam_id)

    return ExamRecord(exam_id, images)


def generate_phantom_dataset(n_exams: int, malignant_fraction: float, out_dir: str, seed: int,
                             spec: PhantomSpec = None) -> list:
    """ Renders a whole dataset.

    :param n_exams: number of exams
    :param malignant_fraction: share of malignant exams, rounded to whole exams
    :param out_dir: dataset directory
    :param seed: random seed
    :param spec: generator parameters, defaults to PhantomSpec()
    :return: list of ExamRecord
    """
    if n_exams < 1:
        raise InvalidArgumentError(f"Need at least one exam, got {n_exams}.")

    if not 0.0 <= malignant_fraction <= 1.0:
        raise InvalidArgumentError(f"Malignant fraction must lie in [0, 1], got {malignant_fraction}.")

    spec = spec or PhantomSpec()
    rng = np.random.default_rng(seed)

    n_malignant = int(round(n_exams * malignant_fraction))
    labels = np.zeros(n_exams, dtype=bool)
    labels[rng.permutation(n_exams)[:n_malignant]] = True

    exams = [generate_phantom_exam(rng, spec, f'exam{index:04d}', out_dir, bool(labels[index]))
             for index in range(n_exams)]

    logger.info("Generated %d phantom exams (%d malignant) in %s.", n_exams, n_malignant, out_dir)
    return exams


if __name__ == '__main__':
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        exam = generate_phantom_exam(np.random.default_rng(0), PhantomSpec(), 'demo', tmp, malignant=True)
        for image in exam.images:
            print(image, [lesion.center_of_mass_mm for lesion in image.lesions])
