import numpy as np

from lesiondet.core.errors import InvalidArgumentError, ShapeError


"""
    image.py

    Image and BreastMask containers. Pixels are row-major 2-D float32
    grids with an isotropic physical spacing in millimetres. Physical
    positions follow the convention x_mm = column * spacing_mm and
    y_mm = row * spacing_mm.
"""


class Image:
    def __init__(self, pixels, spacing_mm: float):
        """
        :param pixels: 2-D array-like of intensities, stored as float32
        :param spacing_mm: isotropic pixel spacing in mm
        """
        pixels = np.asarray(pixels, dtype=np.float32)

        if pixels.ndim != 2 or pixels.size == 0:
            raise ShapeError(f"Image pixels must be a non-empty 2-D grid, got shape {pixels.shape}.")

        if not spacing_mm > 0:
            raise InvalidArgumentError(f"Pixel spacing must be positive, got {spacing_mm}.")

        self.pixels: np.ndarray = pixels
        self.spacing_mm: float = float(spacing_mm)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple:
        return self.pixels.shape

    def with_pixels(self, pixels) -> 'Image':
        """ Returns a new image sharing this image's spacing. """
        return Image(pixels, self.spacing_mm)

    def __repr__(self):
        return f"Image({self.height}x{self.width} @ {self.spacing_mm} mm)"


class BreastMask:
    def __init__(self, bits):
        """
        :param bits: 2-D boolean grid congruent with its image
        """
        bits = np.asarray(bits, dtype=bool)

        if bits.ndim != 2:
            raise ShapeError(f"Mask must be a 2-D grid, got shape {bits.shape}.")

        self.bits: np.ndarray = bits
        self.area_px: int = int(np.count_nonzero(bits))

    @property
    def shape(self) -> tuple:
        return self.bits.shape

    @classmethod
    def full(cls, img: Image) -> 'BreastMask':
        """ Mask covering every pixel of the image. """
        return cls(np.ones(img.shape, dtype=bool))

    def check_congruent(self, img: Image) -> None:
        """ Raises a ShapeError if the mask does not match the image grid. """
        if self.bits.shape != img.shape:
            raise ShapeError(f"Mask shape {self.bits.shape} does not match image shape {img.shape}.")
