"""Approximate homomorphic encryption over power-of-two cyclotomic rings."""
from .ckks import (
    Ciphertext,
    GaloisKeys,
    HEError,
    KeyMaterial,
    PublicKey,
    SecretKey,
    SwitchingKey,
    add,
    chunk_vector,
    cipher_count,
    decode,
    decrypt,
    encode,
    encrypt,
    keygen,
    multiply,
    multiply_int,
    negate,
    rotate,
    sub,
    sum_slots,
)
from .params import HEParams, ParameterError, default_params, small_params

__all__ = [
    "Ciphertext", "GaloisKeys", "HEError", "HEParams", "KeyMaterial", "ParameterError",
    "PublicKey", "SecretKey", "SwitchingKey", "add", "chunk_vector", "cipher_count",
    "decode", "decrypt", "default_params", "encode", "encrypt", "keygen", "multiply",
    "multiply_int", "negate", "rotate", "small_params", "sub", "sum_slots",
]
