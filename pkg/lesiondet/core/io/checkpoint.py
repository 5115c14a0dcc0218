import os
import struct

import numpy as np

from lesiondet.core.errors import FormatError, ShapeError


"""
    checkpoint.py

    CKPT1 container for named 4-D float32 arrays:

        CKPT1\n
        <uint32 count>
        per array:
            <uint32 name length> <utf-8 name>
            <4 x uint32 shape>
            <little-endian float32 values, row-major>

    All integers are little-endian.
"""

CKPT1_MAGIC = b'CKPT1\n'


def write_ckpt1(path: str, arrays: dict) -> None:
    """ Writes named arrays in insertion order.

    :param path: destination file
    :param arrays: name -> 4-D array
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    with open(path, 'wb') as f:
        f.write(CKPT1_MAGIC)
        f.write(struct.pack('<I', len(arrays)))

        for name, value in arrays.items():
            value = np.asarray(value)
            if value.ndim != 4:
                raise ShapeError(f"Checkpoint entry '{name}' must be 4-D, got shape {value.shape}.")

            encoded = name.encode('utf-8')
            f.write(struct.pack('<I', len(encoded)))
            f.write(encoded)
            f.write(struct.pack('<4I', *value.shape))
            f.write(np.ascontiguousarray(value, dtype='<f4').tobytes())


def read_ckpt1(path: str) -> dict:
    """ Reads a CKPT1 file.

    :param path: source file
    :return: name -> float32 array, in file order
    """
    with open(path, 'rb') as f:
        payload = f.read()

    if not payload.startswith(CKPT1_MAGIC):
        raise FormatError(f"{path} is not a CKPT1 checkpoint.")

    arrays = {}
    offset = len(CKPT1_MAGIC)

    try:
        (count,) = struct.unpack_from('<I', payload, offset)
        offset += 4

        for _ in range(count):
            (length,) = struct.unpack_from('<I', payload, offset)
            offset += 4
            name = payload[offset:offset + length].decode('utf-8')
            offset += length

            shape = struct.unpack_from('<4I', payload, offset)
            offset += 16

            size = int(np.prod(shape)) * 4
            if offset + size > len(payload):
                raise FormatError(f"{path}: entry '{name}' is truncated.")

            arrays[name] = np.frombuffer(payload, dtype='<f4', count=size // 4, offset=offset).reshape(shape).astype(np.float32)
            offset += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated CKPT1 header.") from exc

    return arrays
