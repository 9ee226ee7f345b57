from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class KeyKind(enum.Enum):
    RSA_FACTOR = "rsa-factor"
    AES128 = "aes128"
    AES256 = "aes256"
    KEY_CONTEXT = "key-context"


@dataclass(frozen=True)
class KeyCandidate:
    kind: KeyKind
    offset: int
    material: bytes
    score: int = 0
    # footprint in the chunk when it differs from len(material)
    footprint: int | None = None

    @property
    def span(self) -> int:
        return self.footprint if self.footprint is not None else len(self.material)

    def shifted(self, delta: int) -> "KeyCandidate":
        return KeyCandidate(self.kind, self.offset + delta, self.material, self.score,
                            self.footprint)


def as_array(chunk) -> np.ndarray:
    if isinstance(chunk, np.ndarray):
        return chunk.astype(np.uint8, copy=False).ravel()
    return np.frombuffer(chunk, dtype=np.uint8)
