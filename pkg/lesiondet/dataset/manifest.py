import os

from lesiondet.core.errors import DataError
from lesiondet.core.io import txt
from lesiondet.dataset.records import ImageRecord, group_exams


"""
    manifest.py

    JSON-lines dataset manifest, one image record per line:

        {"exam_id": ..., "image_id": ..., "path": ..., "view": "CC"|"MLO",
         "laterality": "L"|"R", "spacing_mm": ...,
         "lesions": [{"id": ..., "mask_path": ..., "com_mm": [x, y]}]}

    Paths are relative to the manifest's directory.
"""


def read_manifest(path: str) -> list:
    """ Reads every image record of a manifest.

    :param path: manifest file
    :return: list of ImageRecord in file order
    """
    base_dir = os.path.dirname(os.path.abspath(path))

    try:
        lines = txt.read_json_lines(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    records = [ImageRecord.from_dict(values, base_dir) for values in lines]

    seen = set()
    for record in records:
        if record.image_id in seen:
            raise DataError(f"Manifest {path} lists image {record.image_id} twice.")
        seen.add(record.image_id)

    return records


def read_exams(path: str) -> list:
    """ Reads a manifest and groups it into ExamRecords. """
    return group_exams(read_manifest(path))


def write_manifest(path: str, records: list) -> None:
    """ Writes image records with paths relative to the manifest. """
    base_dir = os.path.dirname(os.path.abspath(path))
    txt.write_json_lines(path, [record.to_dict(base_dir) for record in records])
