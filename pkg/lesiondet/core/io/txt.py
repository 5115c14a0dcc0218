import json
import os

"""
    txt.py

    Collection of utility methods for interacting with text files: plain
    line lists, JSON documents and JSON-lines record files.
"""


def read(path: str) -> list:
    """ Reads the file at specified path and returns its contents.

    :param path: path to file.
    :return: list of strings containing file data
    """
    with open(path) as f:
        return f.readlines()


def write(path: str, lines: list, clobber: bool = True) -> None:
    """ Writes file to disk. Will overwrite existing file if it already
    exists. Missing parent directories are created.

    :param path: destination to write file.
    :param lines: lines to write to the file.
    :param clobber: whether to overwrite an existing file
    """
    if os.path.exists(path) and not clobber:
        raise IOError(f"File {path} already exists.")

    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)

    with open(path, 'w', newline='\n') as f:
        for line in lines:
            f.write(line)


def read_json_lines(path: str, comment: str = '#') -> list:
    """ Reads a JSON-lines file. Blank lines and comment lines are skipped.

    :param path: path to file.
    :param comment: comment character
    :return: list of decoded objects in file order
    """
    records = []

    for number, line in enumerate(read(path), start=1):
        line = line.strip()
        if not line or line.startswith(comment):
            continue

        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{number}: invalid JSON ({exc.msg}).") from exc

    return records


def write_json_lines(path: str, records: list, clobber: bool = True) -> None:
    """ Writes one compact JSON object per line. Keys are sorted so equal
    records always produce identical bytes.

    :param path: destination to write file.
    :param records: JSON-serializable objects
    :param clobber: whether to overwrite an existing file
    """
    write(path, [json.dumps(record, sort_keys=True) + '\n' for record in records], clobber=clobber)


def read_json(path: str):
    """ Reads a JSON document. """
    with open(path) as f:
        return json.load(f)


def write_json(path: str, document, clobber: bool = True) -> None:
    """ Writes a JSON document with stable key order. """
    write(path, [json.dumps(document, indent=2, sort_keys=True), '\n'], clobber=clobber)
