import logging
import os

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import cKDTree

from lesiondet.core.errors import EmptyMaskError, InvalidArgumentError
from lesiondet.dataset.records import mask_center_of_mass


"""
    candidates.py

    Turns probability maps into candidate points and lesion annotations
    into lesion points.

    The map is binarized at the base threshold (strictly greater than),
    every pixel of every connected component becomes a raw candidate
    scored by its probability, and greedy clustering keeps the
    highest-scoring pixel of each 15 mm neighbourhood. Sweeping a
    threshold T afterwards is a plain filter on the retained list, so the
    candidate sets are nested in T by construction.

    Physical positions use x_mm = column * spacing and y_mm = row * spacing.
"""

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class ProbabilityMap:
    def __init__(self, values, spacing_mm: float):
        """
        :param values: 2-D grid of probabilities in [0, 1]
        :param spacing_mm: pixel spacing in mm
        """
        values = np.asarray(values, dtype=np.float32)

        if values.ndim != 2:
            raise InvalidArgumentError(f"Probability maps are 2-D, got shape {values.shape}.")

        if not np.all((values >= 0) & (values <= 1)):
            raise InvalidArgumentError("Probability map values must lie in [0, 1].")

        if not spacing_mm > 0:
            raise InvalidArgumentError(f"Pixel spacing must be positive, got {spacing_mm}.")

        self.values: np.ndarray = values
        self.spacing_mm: float = float(spacing_mm)

    @property
    def shape(self) -> tuple:
        return self.values.shape


class Candidate:
    def __init__(self, position_mm: tuple, score: float, row: int = None, col: int = None, component: int = 0):
        """
        :param position_mm: (x, y) in mm
        :param score: map value at the source pixel
        :param row: source pixel row
        :param col: source pixel column
        :param component: label of the connected component it came from
        """
        self.position_mm: tuple = position_mm
        self.score: float = score
        self.row = row
        self.col = col
        self.component = component

    def __repr__(self):
        return f"Candidate(x={self.position_mm[0]:.2f}, y={self.position_mm[1]:.2f}, score={self.score:.4f})"


class LesionPoint:
    def __init__(self, position_mm: tuple, lesion_id: str, image_id: str):
        self.position_mm: tuple = position_mm
        self.lesion_id: str = lesion_id
        self.image_id: str = image_id

    def __repr__(self):
        return f"LesionPoint({self.lesion_id}, x={self.position_mm[0]:.2f}, y={self.position_mm[1]:.2f})"


def binarize(prob_map: ProbabilityMap, threshold: float = 0.5) -> np.ndarray:
    """ Pixels strictly above the threshold. """
    if not 0 <= threshold <= 1:
        raise InvalidArgumentError(f"Threshold must lie in [0, 1], got {threshold}.")

    return prob_map.values > threshold


def connected_components(bits: np.ndarray) -> tuple:
    """ 8-connected labelling. Labels run 1..n in the raster order of
    each component's first pixel; background is 0.

    :param bits: 2-D boolean grid
    :return: (label grid, component count)
    """
    labels, count = ndimage.label(np.asarray(bits, dtype=bool), structure=EIGHT_CONNECTED)

    if count == 0:
        return labels, 0

    present, first = np.unique(labels.ravel(), return_index=True)
    present, first = present[present > 0], first[present > 0]

    remap = np.zeros(count + 1, dtype=labels.dtype)
    remap[present[np.argsort(first)]] = np.arange(1, count + 1, dtype=labels.dtype)

    return remap[labels], count


def distance_mm(a, b) -> np.ndarray:
    """ Euclidean distance between (x, y) positions; broadcasts over rows. """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])


def cluster_points(positions_mm: np.ndarray, scores: np.ndarray, raster_index: np.ndarray,
                   radius_mm: float) -> np.ndarray:
    """ Greedy clustering: visit points by descending score (ties by
    raster index), keep a point unless an earlier kept point lies within
    the radius, and suppress everything within the radius of each kept
    point. The result does not depend on the input order.

    :param positions_mm: (n, 2) array of (x, y)
    :param scores: (n,) scores
    :param raster_index: (n,) unique tie-break keys
    :param radius_mm: suppression radius
    :return: indices of kept points, in visiting order
    """
    if not radius_mm > 0:
        raise InvalidArgumentError(f"Cluster radius must be positive, got {radius_mm}.")

    positions = np.asarray(positions_mm, dtype=np.float64).reshape(-1, 2)
    if len(positions) == 0:
        return np.zeros(0, dtype=int)

    order = np.lexsort((np.asarray(raster_index), -np.asarray(scores, dtype=np.float64)))
    tree = cKDTree(positions)
    suppressed = np.zeros(len(positions), dtype=bool)
    kept = []

    for index in order:
        if suppressed[index]:
            continue

        kept.append(index)
        near = np.asarray(tree.query_ball_point(positions[index], radius_mm * (1 + 1e-9)), dtype=int)
        suppressed[near[distance_mm(positions[near], positions[index]) <= radius_mm]] = True

    return np.asarray(kept, dtype=int)


def extract_candidates(prob_map: ProbabilityMap, base_threshold: float = 0.5,
                       cluster_radius_mm: float = 15.0) -> list:
    """ Candidate points of a probability map, sorted by descending score.

    :param prob_map: network output
    :param base_threshold: binarization threshold
    :param cluster_radius_mm: suppression radius
    :return: list of Candidate
    """
    if not cluster_radius_mm > 0:
        raise InvalidArgumentError(f"Cluster radius must be positive, got {cluster_radius_mm}.")

    bits = binarize(prob_map, base_threshold)
    labels, count = connected_components(bits)

    rows, cols = np.nonzero(bits)
    if len(rows) == 0:
        return []

    spacing = prob_map.spacing_mm
    scores = prob_map.values[rows, cols]
    positions = np.column_stack([cols * spacing, rows * spacing])
    raster = rows * prob_map.shape[1] + cols

    kept = cluster_points(positions, scores, raster, cluster_radius_mm)
    logger.debug("%d raw candidates in %d components clustered to %d.", len(rows), count, len(kept))

    return [Candidate((float(positions[i, 0]), float(positions[i, 1])), float(scores[i]),
                      int(rows[i]), int(cols[i]), int(labels[rows[i], cols[i]]))
            for i in kept]


def filter_candidates(candidates: list, threshold: float) -> list:
    """ Candidates with score >= threshold. """
    return [c for c in candidates if c.score >= threshold]


def lesion_points(record) -> list:
    """ Centre of mass of every lesion mask of an image record.

    :param record: ImageRecord with loaded lesion masks
    :return: list of LesionPoint
    """
    points = []

    for lesion in record.lesions:
        try:
            position = mask_center_of_mass(lesion.load_mask(), lesion.spacing_mm)
        except EmptyMaskError as exc:
            raise EmptyMaskError(f"Lesion {lesion.id} of image {record.image_id} has an empty mask.") from exc

        points.append(LesionPoint(position, lesion.id, record.image_id))

    return points


def candidates_to_frame(per_image: dict) -> pd.DataFrame:
    """ Flattens image_id -> candidates into a table. """
    rows = [(image_id, c.position_mm[0], c.position_mm[1], c.score)
            for image_id, candidates in per_image.items() for c in candidates]
    return pd.DataFrame(rows, columns=['image_id', 'x_mm', 'y_mm', 'score'])


def write_candidates_csv(path: str, per_image: dict) -> None:
    """ Writes image_id, x_mm, y_mm, score with six decimals. """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    candidates_to_frame(per_image).to_csv(path, index=False, float_format='%.6f')
