import logging
import math

import numpy as np

from lesiondet.core.errors import DataError, InvalidArgumentError
from lesiondet.core.io import txt


"""
    split.py

    Exam-level train/validation/test split. All images of an exam share
    the exam's split. Exams are shuffled within their label stratum and
    interleaved proportionally before the ordered list is cut at the
    split sizes, so every split carries about the global malignant
    fraction.
"""

logger = logging.getLogger(__name__)

TRAIN, VAL, TEST = 'train', 'val', 'test'
SPLITS = (TRAIN, VAL, TEST)
DEFAULT_FRACTIONS = (0.5, 0.1, 0.4)


class SplitAssignment:
    def __init__(self, mapping: dict):
        """
        :param mapping: exam_id -> 'train' | 'val' | 'test'
        """
        unknown = {split for split in mapping.values() if split not in SPLITS}
        if unknown:
            raise DataError(f"Unknown split name(s) {sorted(unknown)}.")

        self.mapping: dict = dict(mapping)

    def split_of(self, exam_id: str) -> str:
        if exam_id not in self.mapping:
            raise DataError(f"Exam {exam_id} is not part of the split assignment.")
        return self.mapping[exam_id]

    def exam_ids(self, split: str) -> list:
        return [exam_id for exam_id, assigned in self.mapping.items() if assigned == split]

    def select(self, exams: list, split: str) -> list:
        """ Exams of the given split, in input order. """
        return [exam for exam in exams if self.split_of(exam.exam_id) == split]

    def save(self, path: str) -> None:
        txt.write_json(path, self.mapping)

    @classmethod
    def load(cls, path: str) -> 'SplitAssignment':
        return cls(txt.read_json(path))


def _round(value: float) -> int:
    return int(math.floor(value + 0.5))


def split_sizes(count: int, fractions: tuple = DEFAULT_FRACTIONS) -> tuple:
    """ (train, val, test) sizes; validation and test get at least one exam. """
    val = max(1, _round(fractions[1] * count))
    test = max(1, _round(fractions[2] * count))
    return count - val - test, val, test


def split_exams(exams: list, seed: int, fractions: tuple = DEFAULT_FRACTIONS) -> SplitAssignment:
    """ Deterministic stratified exam-level split.

    :param exams: ExamRecords
    :param seed: shuffle seed
    :param fractions: (train, val, test) fractions
    :return: SplitAssignment
    """
    if len(exams) < len(SPLITS):
        raise InvalidArgumentError(f"At least {len(SPLITS)} exams are needed for a split, got {len(exams)}.")

    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise InvalidArgumentError(f"Split fractions must be three non-negative values summing to 1, got {fractions}.")

    rng = np.random.default_rng(seed)
    keyed = []

    for label in sorted({exam.label for exam in exams}):
        stratum = sorted(exam.exam_id for exam in exams if exam.label == label)
        order = rng.permutation(len(stratum))

        # Position inside the stratum scaled to [0, 1) spreads each label evenly.
        for rank, index in enumerate(order):
            keyed.append(((rank + 0.5) / len(stratum), label, stratum[index]))

    keyed.sort()
    sizes = split_sizes(len(exams), fractions)
    names = [TRAIN] * sizes[0] + [VAL] * sizes[1] + [TEST] * sizes[2]

    assignment = SplitAssignment({exam_id: name for (_, _, exam_id), name in zip(keyed, names)})
    logger.info("Split %d exams into %d/%d/%d (train/val/test).", len(exams), *sizes)
    return assignment
