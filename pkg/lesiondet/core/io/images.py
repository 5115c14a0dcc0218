import os

import numpy as np
from PIL import Image as PILImage

from lesiondet.core.errors import FormatError, InvalidArgumentError
from lesiondet.core.imaging.image import Image


"""
    images.py

    Image readers and writers.

    F32I is the internal interchange format for images and probability
    maps:

        F32I\n
        <width> <height> <spacing_mm>\n
        <width * height little-endian float32 pixels, row-major>

    Raw inputs may also be 16-bit grayscale PNG or PGM (P5); those carry
    no spacing, so the caller supplies it. Masks are stored as PGM with
    values 0 and 255.
"""

F32I_MAGIC = b'F32I\n'


def write_f32i(path: str, img: Image) -> None:
    """ Writes an image in F32I format.

    :param path: destination file
    :param img: image to store
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    header = f"{img.width} {img.height} {img.spacing_mm!r}\n".encode('ascii')

    with open(path, 'wb') as f:
        f.write(F32I_MAGIC)
        f.write(header)
        f.write(np.ascontiguousarray(img.pixels, dtype='<f4').tobytes())


def read_f32i(path: str) -> Image:
    """ Reads an F32I image.

    :param path: source file
    :return: Image with the stored spacing
    """
    with open(path, 'rb') as f:
        if f.read(len(F32I_MAGIC)) != F32I_MAGIC:
            raise FormatError(f"{path} is not an F32I file.")

        fields = f.readline().decode('ascii', errors='replace').split()
        payload = f.read()

    try:
        width, height, spacing = int(fields[0]), int(fields[1]), float(fields[2])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path} has a malformed F32I header.") from exc

    if len(payload) != 4 * width * height:
        raise FormatError(f"{path} holds {len(payload)} pixel bytes, expected {4 * width * height}.")

    pixels = np.frombuffer(payload, dtype='<f4').reshape(height, width)
    return Image(pixels.astype(np.float32), spacing)


def read_grayscale(path: str) -> np.ndarray:
    """ Reads a PNG or PGM file as a float32 array, preserving 16-bit
    values.
    """
    try:
        with PILImage.open(path) as handle:
            data = np.asarray(handle)
    except PILImage.UnidentifiedImageError as exc:
        raise FormatError(f"{path} is not a readable grayscale image.") from exc

    if data.ndim != 2:
        raise FormatError(f"{path} is not single-channel (shape {data.shape}).")

    return data.astype(np.float32)


def read_image(path: str, spacing_mm: float = None) -> Image:
    """ Reads an image, dispatching on the file suffix.

    :param path: .f32i, .png or .pgm file
    :param spacing_mm: spacing for formats that do not store it
    :return: Image
    """
    suffix = os.path.splitext(path)[1].lower()

    if suffix == '.f32i':
        return read_f32i(path)

    if suffix in ('.png', '.pgm'):
        if spacing_mm is None:
            raise InvalidArgumentError(f"{path}: {suffix} files need an explicit spacing_mm.")
        return Image(read_grayscale(path), spacing_mm)

    raise InvalidArgumentError(f"Unsupported image format '{suffix}' for {path}.")


def write_mask(path: str, bits: np.ndarray) -> None:
    """ Writes a boolean grid as an 8-bit PGM (P5) with values 0/255. """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    data = np.where(np.asarray(bits, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(data, mode='L').save(path, format='PPM')


def read_mask(path: str) -> np.ndarray:
    """ Reads a 0/255 mask file into a boolean grid. """
    return read_grayscale(path) > 127
