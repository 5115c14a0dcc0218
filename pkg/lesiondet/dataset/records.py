import os

import numpy as np

from lesiondet.core.errors import DataError, EmptyMaskError, InvalidArgumentError
from lesiondet.core.io.images import read_mask


"""
    records.py

    Exam, image and lesion annotation records. An exam groups the views
    of one screening visit; an image is normal when it carries no lesion
    annotations, and an exam is malignant when any of its images does.

    Records are serialized as manifest dictionaries whose file paths are
    relative to the manifest's directory.
"""

VIEWS = ('CC', 'MLO')
LATERALITIES = ('L', 'R')
NORMAL, MALIGNANT = 'normal', 'malignant'


def mask_center_of_mass(bits: np.ndarray, spacing_mm: float) -> tuple:
    """ Unweighted centroid (x, y) in mm of the true pixels. """
    rows, cols = np.nonzero(bits)

    if len(rows) == 0:
        raise EmptyMaskError("Cannot compute the centre of mass of an empty mask.")

    return float(cols.mean() * spacing_mm), float(rows.mean() * spacing_mm)


def _relative(path: str, base_dir: str) -> str:
    return os.path.relpath(path, base_dir) if base_dir else path


def _absolute(path: str, base_dir: str) -> str:
    return path if os.path.isabs(path) or not base_dir else os.path.join(base_dir, path)


class LesionAnnotation:
    def __init__(self, lesion_id: str, spacing_mm: float, mask: np.ndarray = None, mask_path: str = None,
                 center_of_mass_mm: tuple = None):
        """
        :param lesion_id: identifier, unique within the dataset
        :param spacing_mm: spacing of the mask grid
        :param mask: boolean grid congruent with the image, or None to
            load lazily from mask_path
        :param mask_path: PGM file holding the mask
        :param center_of_mass_mm: (x, y); computed from the mask if omitted
        """
        if mask is None and mask_path is None:
            raise InvalidArgumentError(f"Lesion {lesion_id} needs a mask or a mask path.")

        self.id: str = lesion_id
        self.spacing_mm: float = float(spacing_mm)
        self.mask_path: str = mask_path
        self.mask: np.ndarray = None if mask is None else np.asarray(mask, dtype=bool)

        if center_of_mass_mm is None:
            center_of_mass_mm = mask_center_of_mass(self.load_mask(), self.spacing_mm)

        self.center_of_mass_mm: tuple = tuple(float(v) for v in center_of_mass_mm)

    def load_mask(self) -> np.ndarray:
        """ Returns the mask, reading it from disk on first use. """
        if self.mask is None:
            self.mask = read_mask(self.mask_path)

        return self.mask

    def to_dict(self, base_dir: str = None) -> dict:
        return {'id': self.id, 'mask_path': _relative(self.mask_path, base_dir),
                'com_mm': list(self.center_of_mass_mm)}

    @classmethod
    def from_dict(cls, values: dict, spacing_mm: float, base_dir: str = None) -> 'LesionAnnotation':
        mask_path = _absolute(values['mask_path'], base_dir)
        lesion_id = values.get('id') or os.path.splitext(os.path.basename(mask_path))[0]
        return cls(lesion_id, spacing_mm, mask_path=mask_path, center_of_mass_mm=values['com_mm'])


class ImageRecord:
    def __init__(self, exam_id: str, path: str, view: str, laterality: str, lesions: list = None,
                 image_id: str = None, spacing_mm: float = None, preprocessed: bool = False,
                 mask_path: str = None):
        """
        :param exam_id: exam the image belongs to
        :param path: image file
        :param view: 'CC' or 'MLO'
        :param laterality: 'L' or 'R'
        :param lesions: LesionAnnotations, empty for a normal image
        :param image_id: identifier, defaults to <exam>_<laterality>_<view>
        :param spacing_mm: spacing for formats that do not store it
        :param preprocessed: the image is already on the working grid
        :param mask_path: breast mask written by the preprocess command
        """
        if view not in VIEWS:
            raise DataError(f"Unknown view '{view}' for exam {exam_id}.")

        if laterality not in LATERALITIES:
            raise DataError(f"Unknown laterality '{laterality}' for exam {exam_id}.")

        self.exam_id: str = exam_id
        self.path: str = path
        self.view: str = view
        self.laterality: str = laterality
        self.lesions: list = list(lesions or [])
        self.image_id: str = image_id or f'{exam_id}_{laterality}_{view}'
        self.spacing_mm = spacing_mm
        self.preprocessed: bool = preprocessed
        self.mask_path = mask_path

    @property
    def is_normal(self) -> bool:
        return not self.lesions

    def to_dict(self, base_dir: str = None) -> dict:
        values = {
            'exam_id': self.exam_id,
            'image_id': self.image_id,
            'path': _relative(self.path, base_dir),
            'view': self.view,
            'laterality': self.laterality,
            'lesions': [lesion.to_dict(base_dir) for lesion in self.lesions],
        }

        if self.spacing_mm is not None:
            values['spacing_mm'] = self.spacing_mm
        if self.preprocessed:
            values['preprocessed'] = True
        if self.mask_path:
            values['mask_path'] = _relative(self.mask_path, base_dir)

        return values

    @classmethod
    def from_dict(cls, values: dict, base_dir: str = None, lesion_spacing_mm: float = None) -> 'ImageRecord':
        """ Builds a record from a manifest line.

        :param values: decoded manifest line
        :param base_dir: directory relative paths are resolved against
        :param lesion_spacing_mm: mask spacing when the line carries none
        """
        try:
            spacing = values.get('spacing_mm', lesion_spacing_mm)
            lesions = [LesionAnnotation.from_dict(v, spacing, base_dir) for v in values.get('lesions', [])]
            mask_path = values.get('mask_path')

            return cls(values['exam_id'], _absolute(values['path'], base_dir), values['view'], values['laterality'],
                       lesions, values.get('image_id'), values.get('spacing_mm'), bool(values.get('preprocessed')),
                       _absolute(mask_path, base_dir) if mask_path else None)
        except KeyError as exc:
            raise DataError(f"Manifest record is missing field {exc}.") from exc
        except TypeError as exc:
            raise DataError(f"Manifest record for exam {values.get('exam_id')} has no usable spacing.") from exc

    def __repr__(self):
        return f"ImageRecord({self.image_id}, {len(self.lesions)} lesion(s))"


class ExamRecord:
    def __init__(self, exam_id: str, images: list, label: str = None):
        """
        :param exam_id: identifier
        :param images: non-empty list of ImageRecords of this exam
        :param label: 'normal' or 'malignant'; derived when omitted
        """
        if not images:
            raise DataError(f"Exam {exam_id} has no images.")

        derived = MALIGNANT if any(not image.is_normal for image in images) else NORMAL
        if label is not None and label != derived:
            raise DataError(f"Exam {exam_id} is labelled {label} but its annotations make it {derived}.")

        self.exam_id: str = exam_id
        self.images: list = images
        self.label: str = derived

    @property
    def is_malignant(self) -> bool:
        return self.label == MALIGNANT

    def __repr__(self):
        return f"ExamRecord({self.exam_id}, {self.label}, {len(self.images)} image(s))"


def group_exams(records: list) -> list:
    """ Groups image records by exam, keeping first-appearance order. """
    grouped = {}
    for record in records:
        grouped.setdefault(record.exam_id, []).append(record)

    return [ExamRecord(exam_id, images) for exam_id, images in grouped.items()]
