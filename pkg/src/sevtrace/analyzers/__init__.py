"""On-the-fly secret identification over raw memory chunks.

All scanners are pure: they never modify the chunk and return candidates in
offset order.
"""
from __future__ import annotations

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from sevtrace.analyzers.aes import aes_expand_key, scan_aes_schedules, schedule_length
from sevtrace.analyzers.context import scan_key_context
from sevtrace.analyzers.rsa import candidate_value, complete_rsa_key, scan_rsa_factor
from sevtrace.analyzers.types import KeyCandidate, KeyKind

__all__ = [
    "KeyCandidate", "KeyKind", "aes_expand_key", "candidate_value", "complete_rsa_key",
    "encrypt_block", "scan_aes_schedules", "scan_key_context", "scan_rsa_factor",
    "schedule_length", "verify_key_candidate",
]


def encrypt_block(key: bytes, block: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def _aes_key(candidate: KeyCandidate) -> bytes:
    key = candidate.material
    if candidate.kind is KeyKind.KEY_CONTEXT and len(key) == 64:
        # XTS key pair: the first half is the data-unit key
        return key[:32]
    return key


def verify_key_candidate(candidate: KeyCandidate, probe: tuple[bytes, bytes]) -> bool:
    """Known-answer check: does the candidate key map the probe plaintext to its ciphertext?"""
    if candidate.kind not in (KeyKind.AES128, KeyKind.AES256, KeyKind.KEY_CONTEXT):
        raise ValueError(f"cannot verify a {candidate.kind.value} candidate with an AES probe")
    plaintext, ciphertext = probe
    if len(plaintext) != 16 or len(ciphertext) != 16:
        raise ValueError("probe blocks must be 16 bytes")
    key = _aes_key(candidate)
    if len(key) not in (16, 32):
        return False
    return encrypt_block(key, plaintext) == ciphertext
