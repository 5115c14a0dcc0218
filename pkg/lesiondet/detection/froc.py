import logging
import math
import os
from typing import NamedTuple

import numpy as np
import pandas as pd

from lesiondet.core.errors import DataError, InvalidArgumentError
from lesiondet.detection.candidates import distance_mm


"""
    froc.py

    Image-based and exam-based FROC analysis.

    A lesion is hit at threshold T when a candidate with score >= T lies
    within the hit radius (15 mm by default) of its centre of mass; its
    matched score is the best score among such candidates, and one
    candidate may credit several lesions. False positives are counted on
    normal images only and the FP rate is divided by the number of normal
    images.

    Image-based sensitivity is the mean, over lesion-bearing images, of
    the fraction of the image's lesions that are hit. Exam-based
    sensitivity is the fraction of malignant exams with at least one hit.

    Curves are evaluated at every distinct candidate score plus +inf and
    computed with integer counts, so the values are exactly rounded.
"""

logger = logging.getLogger(__name__)

IMAGE, EXAM = 'image', 'exam'


class LesionMatch:
    def __init__(self, lesion_id: str, matched_score: float = None):
        self.lesion_id = lesion_id
        self.matched_score = matched_score

    def hit(self, threshold: float) -> bool:
        return self.matched_score is not None and self.matched_score >= threshold

    def __repr__(self):
        return f"LesionMatch({self.lesion_id}, {self.matched_score})"


class MatchResult:
    def __init__(self, image_id: str, exam_id: str, lesions: list, false_positive_scores: list,
                 candidate_scores: list):
        """
        :param image_id: image identifier
        :param exam_id: exam the image belongs to
        :param lesions: one LesionMatch per lesion of the image
        :param false_positive_scores: candidate scores counted as FP (normal images only)
        :param candidate_scores: scores of all candidates of the image
        """
        self.image_id = image_id
        self.exam_id = exam_id
        self.lesions: list = lesions
        self.false_positive_scores: list = false_positive_scores
        self.candidate_scores: list = candidate_scores

    @property
    def is_normal(self) -> bool:
        return not self.lesions


class FrocPoint(NamedTuple):
    threshold: float
    fp_per_image: float
    sensitivity: float


class FrocCurve:
    def __init__(self, points: list, kind: str):
        """
        :param points: FrocPoints sorted by ascending threshold
        :param kind: 'image' or 'exam'
        """
        self.points: list = points
        self.kind: str = kind

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([(self.kind, *p) for p in self.points],
                            columns=['kind', 'threshold', 'fp_per_image', 'sensitivity'])

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        return f"FrocCurve({self.kind}, {len(self.points)} points)"


def match_image(candidates: list, lesions: list, hit_radius_mm: float = 15.0,
                image_id: str = None, exam_id: str = None) -> MatchResult:
    """ Matches one image's candidates against its lesion points.

    :param candidates: Candidates of the image
    :param lesions: LesionPoints of the image (empty for a normal image)
    :param hit_radius_mm: hit criterion radius
    :param image_id: image identifier
    :param exam_id: exam identifier
    :return: MatchResult
    """
    scores = np.asarray([c.score for c in candidates], dtype=np.float64)
    positions = np.asarray([c.position_mm for c in candidates], dtype=np.float64).reshape(-1, 2)

    matches = []
    for lesion in lesions:
        within = distance_mm(positions, lesion.position_mm) <= hit_radius_mm
        best = float(scores[within].max()) if np.any(within) else None
        matches.append(LesionMatch(lesion.lesion_id, best))

    false_positives = [] if lesions else [float(s) for s in scores]
    return MatchResult(image_id, exam_id, matches, false_positives, [float(s) for s in scores])


def thresholds_of(matches: list) -> list:
    """ Distinct candidate scores in ascending order, then +inf. """
    return sorted({s for m in matches for s in m.candidate_scores}) + [math.inf]


def _count_at_least(sorted_scores: list, thresholds: list) -> np.ndarray:
    ordered = np.asarray(sorted_scores, dtype=np.float64)
    return len(ordered) - np.searchsorted(ordered, thresholds, side='left')


def _fp_per_image(matches: list, thresholds: list) -> list:
    normals = [m for m in matches if m.is_normal]

    if not normals:
        raise DataError("FROC analysis needs at least one normal image to count false positives.")

    counts = _count_at_least(sorted(s for m in normals for s in m.false_positive_scores), thresholds)
    return [int(c) / len(normals) for c in counts]


def _assemble(thresholds: list, fp: list, sensitivity: list, kind: str) -> FrocCurve:
    return FrocCurve([FrocPoint(t, f, s) for t, f, s in zip(thresholds, fp, sensitivity)], kind)


def froc_image_based(matches: list) -> FrocCurve:
    """ Image-based FROC curve.

    :param matches: MatchResults of every evaluated image
    :return: FrocCurve of kind 'image'
    """
    thresholds = thresholds_of(matches)
    fp = _fp_per_image(matches, thresholds)

    lesion_images = [m for m in matches if not m.is_normal]
    if not lesion_images:
        raise DataError("FROC analysis needs at least one image with a lesion.")

    # Sum of hits_i / lesions_i over a common denominator keeps the mean exact.
    common = math.lcm(*{len(m.lesions) for m in lesion_images})
    numerators = [0] * len(thresholds)

    for m in lesion_images:
        matched = sorted(l.matched_score for l in m.lesions if l.matched_score is not None)
        weight = common // len(m.lesions)
        hits = _count_at_least(matched, thresholds)
        numerators = [n + int(h) * weight for n, h in zip(numerators, hits)]

    denominator = common * len(lesion_images)
    return _assemble(thresholds, fp, [n / denominator for n in numerators], IMAGE)


def froc_exam_based(matches: list) -> FrocCurve:
    """ Exam-based FROC curve; an exam counts as detected when at least
    one of its lesions is hit.

    :param matches: MatchResults carrying exam ids
    :return: FrocCurve of kind 'exam'
    """
    thresholds = thresholds_of(matches)
    fp = _fp_per_image(matches, thresholds)

    # Best matched score per malignant exam, None when nothing is hit.
    best = {}
    for m in matches:
        if m.is_normal:
            continue

        scores = [l.matched_score for l in m.lesions if l.matched_score is not None]
        if best.get(m.exam_id) is not None:
            scores.append(best[m.exam_id])

        best[m.exam_id] = max(scores) if scores else None

    if not best:
        raise DataError("FROC analysis needs at least one malignant exam.")

    hits = _count_at_least(sorted(s for s in best.values() if s is not None), thresholds)
    return _assemble(thresholds, fp, [int(h) / len(best) for h in hits], EXAM)


def sensitivity_at_fp(curve: FrocCurve, fp_per_image: float) -> float:
    """ Highest sensitivity among points whose FP rate does not exceed the
    requested value; 0 if there is none.
    """
    if fp_per_image < 0:
        raise InvalidArgumentError(f"FP rate must be non-negative, got {fp_per_image}.")

    if not curve.points:
        raise InvalidArgumentError("Cannot read an operating point from an empty curve.")

    eligible = [p.sensitivity for p in curve.points if p.fp_per_image <= fp_per_image]
    return max(eligible, default=0.0)


def operating_point(curve: FrocCurve, threshold: float) -> FrocPoint:
    """ The curve point in effect at a threshold: the first point whose
    threshold is at least the requested one.
    """
    for point in curve.points:
        if point.threshold >= threshold:
            return point

    return curve.points[-1]


def max_sensitivity_point(curve: FrocCurve) -> FrocPoint:
    """ Point of highest sensitivity; among equals, the one with the fewest
    false positives per image.
    """
    if not curve.points:
        raise InvalidArgumentError("Cannot read an operating point from an empty curve.")

    return max(curve.points, key=lambda p: (p.sensitivity, -p.fp_per_image, p.threshold))


def summary_line(curve: FrocCurve, base_threshold: float = 0.5) -> str:
    """ Maximum sensitivity and its FP rate, read at the base threshold. """
    point = operating_point(curve, base_threshold)
    return (f"{curve.kind}-based: max sensitivity {point.sensitivity:.4f} "
            f"at {point.fp_per_image:.4f} FP/image (threshold {base_threshold})")


def write_froc_csv(path: str, curves: list) -> None:
    """ Writes kind, threshold, fp_per_image, sensitivity for all curves. """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.concat([c.to_frame() for c in curves], ignore_index=True).to_csv(path, index=False)


def read_froc_csv(path: str) -> list:
    """ Reads curves written by `write_froc_csv`, preserving kind order. """
    frame = pd.read_csv(path, float_precision='round_trip')
    curves = []

    for kind in dict.fromkeys(frame['kind']):
        rows = frame[frame['kind'] == kind]
        points = [FrocPoint(float(t), float(f), float(s))
                  for t, f, s in zip(rows['threshold'], rows['fp_per_image'], rows['sensitivity'])]
        curves.append(FrocCurve(points, kind))

    return curves
