"""LGSE tensor container: bit-exact storage for embeddings, label maps and checkpoints.

Layout (all integers little-endian):

    magic      4 bytes   b"LGSE"
    version    uint32
    count      uint32
    count × entry:
        name_len   uint32
        name       UTF-8 bytes
        dtype      uint8     0 = float32, 1 = float64
        rank       uint32
        extents    rank × int64
        payload    prod(extents) * itemsize bytes, raw little-endian, row-major

Payload sizes are implied by the extents. A last entry whose payload runs short,
or bytes left over after it, means the declared shape disagrees with the payload.
"""

import os
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Union

import numpy as np
import torch

from openvocab_seg.shared.exceptions import (
    BadMagicError,
    EmbeddingFormatError,
    ShapeMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from openvocab_seg.shared.models import EncodedImage, TextBank


MAGIC = b"LGSE"
FORMAT_VERSION = 1

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_FOR_DTYPE = {np.dtype("float32"): 0, np.dtype("float64"): 1}

IMAGE_PREFIX = "image/"
TEXT_PREFIX = "text/"
CATEGORY_PREFIX = "category:"

ArrayLike = Union[torch.Tensor, np.ndarray]


def _to_numpy(value: ArrayLike) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    array = np.asarray(value)
    if array.dtype not in CODE_FOR_DTYPE:
        raise ValueError(f"LGSE stores float32 or float64 only, got {array.dtype}")
    return array


def write_tensors(path: Union[str, Path], entries: Mapping[str, ArrayLike]) -> None:
    """Write named tensors to an LGSE file, in mapping order.

    The file is written to a sibling temporary path and moved into place, so a
    reader never sees a partial file.
    """
    path = Path(path)
    chunks: List[bytes] = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, value in entries.items():
        array = _to_numpy(value)
        code = CODE_FOR_DTYPE[array.dtype]
        encoded = name.encode("utf-8")
        payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes(order="C")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BI", code, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}q", *array.shape))
        chunks.append(payload)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp_path, path)


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if size < 0 or end > len(self.data):
            raise TruncatedPayloadError(
                f"truncated LGSE file: needed {size} byte(s) for {what} at offset {self.offset}, "
                f"{len(self.data) - self.offset} left"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read every entry of an LGSE file.

    Raises:
        BadMagicError: Wrong magic bytes
        VersionMismatchError: Unsupported version
        TruncatedPayloadError: File ends inside a header or a non-final entry
        ShapeMismatchError: Unknown dtype, or extents that disagree with the payload length
    """
    with open(path, "rb") as f:
        data = f.read()
    reader = _Reader(data)
    magic = reader.take(4, "magic") if len(data) >= 4 else data
    if magic != MAGIC:
        raise BadMagicError(f"not an LGSE file: magic {magic!r}")
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"LGSE version {version} is not supported (expected {FORMAT_VERSION})"
        )
    (count,) = reader.unpack("<I", "entry count")

    entries: Dict[str, np.ndarray] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<I", f"entry {index} name length")
        name = reader.take(name_len, f"entry {index} name").decode("utf-8")
        code, rank = reader.unpack("<BI", f"entry {name!r} header")
        if code not in DTYPE_CODES:
            raise ShapeMismatchError(f"entry {name!r}: unknown dtype code {code}")
        extents = reader.unpack(f"<{rank}q", f"entry {name!r} extents")
        if any(e < 0 for e in extents):
            raise ShapeMismatchError(f"entry {name!r}: negative extent in {extents}")
        dtype = DTYPE_CODES[code]
        expected = int(np.prod(extents, dtype=np.int64)) * dtype.itemsize
        left = len(data) - reader.offset
        if index == count - 1 and left != expected:
            raise ShapeMismatchError(
                f"entry {name!r}: shape {tuple(extents)} x {dtype.itemsize} bytes = {expected}, "
                f"but the payload holds {left}"
            )
        payload = reader.take(expected, f"entry {name!r} payload")
        entries[name] = np.frombuffer(payload, dtype=dtype).reshape(extents).copy()

    if reader.offset != len(data):
        extra = len(data) - reader.offset
        raise EmbeddingFormatError(f"{extra} trailing byte(s) after an empty LGSE container")
    return entries


def save_embeddings(obj: Union[EncodedImage, TextBank], path: Union[str, Path]) -> None:
    """Save an EncodedImage or TextBank to LGSE."""
    entries: Dict[str, ArrayLike] = {}
    if isinstance(obj, EncodedImage):
        for name, tensor in obj.tensors().items():
            entries[IMAGE_PREFIX + name] = tensor
    elif isinstance(obj, TextBank):
        dtype = obj.T.detach().cpu().numpy().dtype
        for index, category in enumerate(obj.categories):
            entries[f"{CATEGORY_PREFIX}{index}:{category}"] = np.zeros((0,), dtype=dtype)
        for name, tensor in obj.tensors().items():
            entries[TEXT_PREFIX + name] = tensor
    else:
        raise TypeError(f"cannot save {type(obj).__name__} as embeddings")
    write_tensors(path, entries)


def load_embeddings(path: Union[str, Path]) -> Union[EncodedImage, TextBank]:
    """Load what save_embeddings wrote.

    Raises:
        EmbeddingFormatError: If the file holds neither an image nor a text bank
    """
    entries = read_tensors(path)
    image = {k[len(IMAGE_PREFIX):]: v for k, v in entries.items() if k.startswith(IMAGE_PREFIX)}
    text = {k[len(TEXT_PREFIX):]: v for k, v in entries.items() if k.startswith(TEXT_PREFIX)}
    if image:
        missing = {"V", "F_mid", "S_1", "S_2"} - set(image)
        if missing:
            raise EmbeddingFormatError(f"encoded image is missing {sorted(missing)}")
        return EncodedImage(**{k: torch.from_numpy(image[k]) for k in ("V", "F_mid", "S_1", "S_2")})
    if text:
        names: Dict[int, str] = {}
        for key in entries:
            if key.startswith(CATEGORY_PREFIX):
                index, _, name = key[len(CATEGORY_PREFIX):].partition(":")
                names[int(index)] = name
        categories = [names[i] for i in sorted(names)]
        e_text = text.get("E_text")
        return TextBank(
            categories=categories,
            T=torch.from_numpy(text["T"]),
            T_bar=torch.from_numpy(text["T_bar"]),
            E_text=None if e_text is None else torch.from_numpy(e_text),
        )
    raise EmbeddingFormatError(f"{path}: no image/ or text/ entries")
