"""Byte-level codecs: a CBOR subset, unpadded base64url, and claim-map text rendering.

The CBOR codec covers definite-length items only: 64-bit integers, byte
strings, UTF-8 text, arrays, maps with scalar keys, tags, booleans and null.
Values are modeled as native Python objects (int, bytes, str, list, dict,
bool, None) plus :class:`Tag`; encoding is deterministic and integers always
use the shortest head admitting their magnitude.
"""

from __future__ import annotations

import base64
import binascii
import json
import re
from dataclasses import dataclass
from typing import Any


class CodecError(Exception):
    """Base class for codec failures."""


class CborEncodeError(CodecError):
    pass


class IntegerOutOfRange(CborEncodeError):
    pass


class InvalidUtf8(CborEncodeError):
    pass


class CborDecodeError(CodecError):
    pass


class TruncatedInput(CborDecodeError):
    pass


class TrailingBytes(CborDecodeError):
    pass


class UnsupportedMajorTypeFeature(CborDecodeError):
    pass


class MalformedUtf8(CborDecodeError):
    pass


class DuplicateMapKey(CborDecodeError):
    pass


class Base64Error(CodecError):
    pass


class InvalidAlphabet(Base64Error):
    pass


class InvalidLength(Base64Error):
    pass


@dataclass(frozen=True)
class Tag:
    """A tagged CBOR value (major type 6)."""

    number: int
    value: Any


_UINT64_MAX = (1 << 64) - 1

# Major types of the supported subset.
_MT_UNSIGNED = 0
_MT_NEGATIVE = 1
_MT_BYTES = 2
_MT_TEXT = 3
_MT_ARRAY = 4
_MT_MAP = 5
_MT_TAG = 6
_MT_SIMPLE = 7

_SIMPLE_FALSE = 0xF4
_SIMPLE_TRUE = 0xF5
_SIMPLE_NULL = 0xF6

_SCALAR_KEY_TYPES = (bool, int, str, bytes)


def _encode_head(major: int, arg: int) -> bytes:
    if arg < 24:
        return bytes([(major << 5) | arg])
    if arg < (1 << 8):
        return bytes([(major << 5) | 24, arg])
    if arg < (1 << 16):
        return bytes([(major << 5) | 25]) + arg.to_bytes(2, "big")
    if arg < (1 << 32):
        return bytes([(major << 5) | 26]) + arg.to_bytes(4, "big")
    if arg <= _UINT64_MAX:
        return bytes([(major << 5) | 27]) + arg.to_bytes(8, "big")
    raise IntegerOutOfRange(f"value {arg} exceeds 64-bit CBOR encoding")


def _encode_into(value: Any, out: bytearray) -> None:
    # bool must be tested before int: True/False are ints in Python.
    if isinstance(value, bool):
        out.append(_SIMPLE_TRUE if value else _SIMPLE_FALSE)
    elif value is None:
        out.append(_SIMPLE_NULL)
    elif isinstance(value, int):
        if value >= 0:
            out += _encode_head(_MT_UNSIGNED, value)
        else:
            n = -1 - value
            if n > _UINT64_MAX:
                raise IntegerOutOfRange(f"value {value} exceeds 64-bit CBOR encoding")
            out += _encode_head(_MT_NEGATIVE, n)
    elif isinstance(value, (bytes, bytearray)):
        out += _encode_head(_MT_BYTES, len(value))
        out += bytes(value)
    elif isinstance(value, str):
        try:
            data = value.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise InvalidUtf8(str(exc)) from exc
        out += _encode_head(_MT_TEXT, len(data))
        out += data
    elif isinstance(value, (list, tuple)):
        out += _encode_head(_MT_ARRAY, len(value))
        for item in value:
            _encode_into(item, out)
    elif isinstance(value, dict):
        out += _encode_head(_MT_MAP, len(value))
        for key, item in value.items():
            if not (key is None or isinstance(key, _SCALAR_KEY_TYPES)):
                raise CborEncodeError(f"unsupported map key type {type(key).__name__}")
            _encode_into(key, out)
            _encode_into(item, out)
    elif isinstance(value, Tag):
        if not 0 <= value.number <= _UINT64_MAX:
            raise IntegerOutOfRange(f"tag number {value.number} out of range")
        out += _encode_head(_MT_TAG, value.number)
        _encode_into(value.value, out)
    else:
        raise CborEncodeError(f"unsupported value type {type(value).__name__}")


def encode_cbor(value: Any) -> bytes:
    """Encode a supported value to definite-length, minimal-width CBOR."""
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


class _Decoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedInput(
                f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def _head(self) -> tuple[int, int, int]:
        initial = self._take(1)[0]
        major = initial >> 5
        info = initial & 0x1F
        if info < 24:
            return major, info, info
        if info == 24:
            return major, info, self._take(1)[0]
        if info == 25:
            return major, info, int.from_bytes(self._take(2), "big")
        if info == 26:
            return major, info, int.from_bytes(self._take(4), "big")
        if info == 27:
            return major, info, int.from_bytes(self._take(8), "big")
        if info == 31:
            raise UnsupportedMajorTypeFeature(
                f"indefinite-length item (major type {major}) at offset {self.pos - 1}"
            )
        raise UnsupportedMajorTypeFeature(
            f"reserved additional-info value {info} at offset {self.pos - 1}"
        )

    def decode_item(self, *, as_key: bool = False) -> Any:
        major, info, arg = self._head()
        if major == _MT_UNSIGNED:
            return arg
        if major == _MT_NEGATIVE:
            return -1 - arg
        if major == _MT_BYTES:
            return self._take(arg)
        if major == _MT_TEXT:
            raw = self._take(arg)
            try:
                return raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedUtf8(str(exc)) from exc
        if major == _MT_SIMPLE:
            # Direct-form false/true/null only; extended simple values and
            # floats are outside the subset.
            if info == 20:
                return False
            if info == 21:
                return True
            if info == 22:
                return None
            raise UnsupportedMajorTypeFeature(
                f"simple/float value (major type 7, info {info}) is outside the subset"
            )
        if as_key:
            raise UnsupportedMajorTypeFeature(
                f"map key of major type {major} (scalar keys only)"
            )
        if major == _MT_ARRAY:
            return [self.decode_item() for _ in range(arg)]
        if major == _MT_MAP:
            result: dict[Any, Any] = {}
            for _ in range(arg):
                key = self.decode_item(as_key=True)
                if key in result:
                    raise DuplicateMapKey(f"duplicate map key {key!r}")
                result[key] = self.decode_item()
            return result
        return Tag(arg, self.decode_item())


def decode_cbor(data: bytes) -> Any:
    """Decode one CBOR item, consuming the entire input."""
    decoder = _Decoder(bytes(data))
    value = decoder.decode_item()
    if decoder.pos != len(decoder.data):
        raise TrailingBytes(f"{len(decoder.data) - decoder.pos} bytes after item")
    return value


_B64URL_RE = re.compile(r"^[A-Za-z0-9_-]*$")


def base64url_encode(data: bytes) -> str:
    """Encode bytes as base64url without padding."""
    return base64.urlsafe_b64encode(bytes(data)).decode("ascii").rstrip("=")


def base64url_decode(text: str) -> bytes:
    """Decode unpadded base64url text."""
    if not _B64URL_RE.match(text):
        raise InvalidAlphabet(f"non-base64url character in {text!r}")
    rem = len(text) % 4
    if rem == 1:
        raise InvalidLength(f"length {len(text)} is not a valid unpadded base64 length")
    padded = text + "=" * (-len(text) % 4)
    try:
        return base64.urlsafe_b64decode(padded.encode("ascii"))
    except (binascii.Error, ValueError) as exc:
        raise InvalidAlphabet(str(exc)) from exc


def render_claims_text(claims: dict[str, Any]) -> str:
    """Deterministic one-line JSON rendering of a claim map, keys in insertion order.

    Bytes values render as unpadded base64url text.
    """
    return json.dumps(_jsonable(claims), ensure_ascii=False, separators=(", ", ": "))


def parse_claims_text(text: str) -> dict[str, Any]:
    """Parse a claim-map rendering; whitespace-tolerant."""
    value = json.loads(text)
    if not isinstance(value, dict):
        raise CodecError("claim document is not an object")
    return value


def _jsonable(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray)):
        return base64url_encode(value)
    if isinstance(value, dict):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    return value
