import hashlib
import os
import tempfile
from pathlib import Path
from typing import Iterable, Union

import numpy as np

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def derive_seed(root: int, *labels: Union[str, int]) -> int:
    """Stable 63-bit seed for a (root, labels...) lineage."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode("utf-8"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "big") >> 1


def rng_for(root: int, *labels: Union[str, int]) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))


def chunk_sizes(total: int, chunk: int) -> Iterable[int]:
    full, rest = divmod(total, chunk)
    return [chunk] * full + ([rest] if rest else [])
