

"""
    errors.py

    Exception hierarchy shared by every package. The command line maps
    each family to an exit code:

        - InvalidArgumentError: 2
        - DataError (and subclasses): 3
        - FormatError / OSError: 4
"""


class LesionDetError(Exception):
    """ Base class for all lesiondet errors. """


class InvalidArgumentError(LesionDetError, ValueError):
    """ A parameter value is outside its allowed range. """


class DataError(LesionDetError, ValueError):
    """ The data is inconsistent or degenerate for the requested operation. """


class ShapeError(DataError):
    """ Tensor or grid shapes do not agree. """


class EmptyMaskError(DataError):
    """ A mask that must contain pixels is empty. """


class FormatError(LesionDetError, OSError):
    """ A file does not follow its declared on-disk format. """
