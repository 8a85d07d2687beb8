"""Capability-token construction and verification.

Claim sets travel in two wire forms sharing one HMAC-SHA256 protection
scheme: compact JWTs (three unpadded base64url segments) and CWTs (a CBOR
array shaped like a COSE MAC0 structure, integrity only). Grant handling
covers client-credentials, password, symmetric-key and refresh flows.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Mapping

from . import codec

DEFAULT_TOKEN_TTL = 3600
HS256 = "HS256"

_JWT_ALPHABET = set(b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_.")


class TokenError(Exception):
    """Base class for token failures."""


class UnsupportedAlgorithm(TokenError):
    pass


class InvalidClaims(TokenError):
    pass


class MacMismatch(TokenError):
    pass


class Expired(TokenError):
    """Raised past the token lifetime; carries the (MAC-verified) claims."""

    def __init__(self, message: str, claims: "ClaimSet | None" = None):
        super().__init__(message)
        self.claims = claims


class MalformedToken(TokenError):
    pass


class UnknownFormat(TokenError):
    pass


class GrantError(TokenError):
    """Base class for token-grant failures."""


class UnknownClient(GrantError):
    pass


class BadCredentials(GrantError):
    pass


class UnsupportedGrantType(GrantError):
    pass


class InvalidAudience(GrantError):
    pass


class KeyType(Enum):
    SYMMETRIC = "Symmetric"
    OCT = "oct"
    EC2 = "EC2"


_KTY_SPELLINGS = {
    "symmetric": KeyType.SYMMETRIC,
    "oct": KeyType.OCT,
    "ec": KeyType.EC2,
    "ec2": KeyType.EC2,
}


@dataclass(frozen=True)
class CoseKey:
    """A COSE_Key-style key description; symmetric secrets carry material in `k`."""

    kty: KeyType
    kid: bytes = b""
    alg: str | None = None
    k: bytes | None = None
    crv: str | None = None
    x: bytes | None = None
    y: bytes | None = None

    @property
    def is_symmetric(self) -> bool:
        return self.kty in (KeyType.SYMMETRIC, KeyType.OCT)

    def validate(self) -> None:
        if self.is_symmetric and not self.k:
            raise InvalidClaims("symmetric key requires non-empty material k")
        if self.kty is KeyType.EC2 and not (self.crv and self.x and self.y):
            raise InvalidClaims("EC2 key requires crv, x and y")
        if self.alg is not None and self.alg != HS256:
            raise UnsupportedAlgorithm(f"unsupported key algorithm {self.alg!r}")

    def to_map(self, *, binary: bool) -> dict[str, Any]:
        """Field map in COSE_Key layout; bytes stay raw for CBOR, base64url for JSON."""
        out: dict[str, Any] = {"kty": self.kty.value}
        if self.kid:
            out["kid"] = self.kid if binary else codec.base64url_encode(self.kid)
        if self.alg is not None:
            out["alg"] = self.alg
        if self.k is not None:
            out["k"] = self.k if binary else codec.base64url_encode(self.k)
        if self.crv is not None:
            out["crv"] = self.crv
        if self.x is not None:
            out["x"] = self.x if binary else codec.base64url_encode(self.x)
        if self.y is not None:
            out["y"] = self.y if binary else codec.base64url_encode(self.y)
        return out

    @classmethod
    def from_map(cls, mapping: Mapping[str, Any]) -> "CoseKey":
        kty_raw = mapping.get("kty")
        if not isinstance(kty_raw, str) or kty_raw.lower() not in _KTY_SPELLINGS:
            raise InvalidClaims(f"unknown key type {kty_raw!r}")
        key = cls(
            kty=_KTY_SPELLINGS[kty_raw.lower()],
            kid=_as_bytes(mapping.get("kid", b"")),
            alg=mapping.get("alg"),
            k=_opt_bytes(mapping.get("k")),
            crv=mapping.get("crv"),
            x=_opt_bytes(mapping.get("x")),
            y=_opt_bytes(mapping.get("y")),
        )
        key.validate()
        return key


def _as_bytes(value: Any) -> bytes:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    if isinstance(value, str):
        return codec.base64url_decode(value)
    raise InvalidClaims(f"expected bytes or base64url text, got {type(value).__name__}")


def _opt_bytes(value: Any) -> bytes | None:
    return None if value is None else _as_bytes(value)


def new_symmetric_key(kty: KeyType = KeyType.OCT, *, kid: bytes | None = None) -> CoseKey:
    """Generate a fresh 256-bit symmetric key with a random key id."""
    return CoseKey(
        kty=kty,
        kid=kid if kid is not None else secrets.token_bytes(8),
        alg=HS256,
        k=secrets.token_bytes(32),
    )


def new_jti() -> str:
    return secrets.token_hex(5)


@dataclass
class ClaimSet:
    """The capability token's claims."""

    aud: str
    scope: list[str]
    exp: int
    jti: str
    client_id: str
    user_name: str | None = None
    iat: int | None = None
    authorities: str | None = None

    def validate(self) -> None:
        if not self.jti:
            raise InvalidClaims("jti must be non-empty")
        if not self.scope:
            raise InvalidClaims("scope must be non-empty")
        if not self.aud:
            raise InvalidClaims("aud must be non-empty")
        if not self.client_id:
            raise InvalidClaims("client_id must be non-empty")
        if self.iat is not None and self.exp <= self.iat:
            raise InvalidClaims(f"exp {self.exp} must be greater than iat {self.iat}")

    def to_map(self) -> dict[str, Any]:
        """Claim map with the JWT response layout's key order."""
        out: dict[str, Any] = {"aud": self.aud}
        if self.user_name is not None:
            out["user_name"] = self.user_name
        out["scope"] = list(self.scope)
        out["exp"] = self.exp
        if self.iat is not None:
            out["iat"] = self.iat
        if self.authorities is not None:
            out["authorities"] = self.authorities
        out["jti"] = self.jti
        out["client_id"] = self.client_id
        return out

    @classmethod
    def from_map(cls, mapping: Mapping[str, Any]) -> "ClaimSet":
        try:
            scope = mapping["scope"]
            if not isinstance(scope, list) or not all(isinstance(s, str) for s in scope):
                raise InvalidClaims("scope must be a list of text values")
            claims = cls(
                aud=str(mapping["aud"]),
                scope=list(scope),
                exp=int(mapping["exp"]),
                jti=str(mapping["jti"]),
                client_id=str(mapping["client_id"]),
                user_name=mapping.get("user_name"),
                iat=int(mapping["iat"]) if "iat" in mapping else None,
                authorities=mapping.get("authorities"),
            )
        except KeyError as exc:
            raise InvalidClaims(f"missing claim {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise InvalidClaims(str(exc)) from exc
        claims.validate()
        return claims


class TokenFormat(Enum):
    JWT = "jwt"
    CWT = "cwt"


@dataclass
class CapabilityToken:
    format: TokenFormat
    claims: ClaimSet
    wire: bytes
    protection: bytes
    cnf: CoseKey | None = None


def _require_mac_key(key: CoseKey) -> bytes:
    if not key.is_symmetric or not key.k:
        raise UnsupportedAlgorithm("HMAC protection requires a symmetric key")
    if key.alg is not None and key.alg != HS256:
        raise UnsupportedAlgorithm(f"unsupported algorithm {key.alg!r}")
    return key.k


def _hmac256(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def issue_jwt(claims: ClaimSet, key: CoseKey, now: int) -> CapabilityToken:
    """Issue an HS256-protected compact JWT for the claim set.

    `now` is the issuance instant; it is not injected into the claims so the
    wire payload round-trips to exactly the caller's claim set.
    """
    mac_key = _require_mac_key(key)
    claims.validate()
    header = codec.render_claims_text({"alg": HS256, "typ": "JWT"})
    payload = codec.render_claims_text(claims.to_map())
    signing_input = (
        codec.base64url_encode(header.encode("utf-8"))
        + "."
        + codec.base64url_encode(payload.encode("utf-8"))
    ).encode("ascii")
    tag = _hmac256(mac_key, signing_input)
    wire = signing_input + b"." + codec.base64url_encode(tag).encode("ascii")
    return CapabilityToken(TokenFormat.JWT, claims, wire, tag)


_CWT_PROTECTED = codec.encode_cbor({"alg": HS256})


def _mac0_tag(mac_key: bytes, protected: bytes, payload: bytes) -> bytes:
    return _hmac256(mac_key, codec.encode_cbor(["MAC0", protected, payload]))


def issue_cwt(
    claims: ClaimSet, cnf: CoseKey | None, key: CoseKey, now: int
) -> CapabilityToken:
    """Issue a CWT: CBOR claims wrapped in a MAC0-style integrity structure."""
    mac_key = _require_mac_key(key)
    claims.validate()
    if cnf is not None:
        cnf.validate()
    claim_map: dict[str, Any] = claims.to_map()
    if cnf is not None:
        claim_map["cnf"] = {"COSE_Key": cnf.to_map(binary=True)}
    payload = codec.encode_cbor(claim_map)
    tag = _mac0_tag(mac_key, _CWT_PROTECTED, payload)
    wire = codec.encode_cbor([_CWT_PROTECTED, {}, payload, tag])
    return CapabilityToken(TokenFormat.CWT, claims, wire, tag, cnf=cnf)


def _looks_like_jwt(wire: bytes) -> bool:
    return wire.count(b".") == 2 and all(b in _JWT_ALPHABET for b in wire)


def verify_token(wire: bytes, key: CoseKey, now: int) -> ClaimSet:
    """Verify protection and lifetime; returns the claims on success.

    Both the MAC and the expiry check always run; the MAC is compared in
    constant time and a mismatch is reported ahead of expiry.
    """
    mac_key = _require_mac_key(key)
    if not wire:
        raise UnknownFormat("empty token")
    if _looks_like_jwt(wire):
        mac_ok, claims = _verify_jwt(wire, mac_key)
    else:
        mac_ok, claims = _verify_cwt(wire, mac_key)
    expired = now >= claims.exp
    if not mac_ok:
        raise MacMismatch("token protection does not verify")
    if expired:
        raise Expired(f"token expired at {claims.exp}", claims)
    return claims


def _verify_jwt(wire: bytes, mac_key: bytes) -> tuple[bool, ClaimSet]:
    head, payload, sig = wire.split(b".")
    try:
        header_doc = codec.parse_claims_text(
            codec.base64url_decode(head.decode("ascii")).decode("utf-8")
        )
        payload_doc = codec.parse_claims_text(
            codec.base64url_decode(payload.decode("ascii")).decode("utf-8")
        )
        tag = codec.base64url_decode(sig.decode("ascii"))
    except (codec.CodecError, UnicodeDecodeError, ValueError) as exc:
        raise MalformedToken(f"bad JWT segment: {exc}") from exc
    if header_doc.get("alg") != HS256:
        raise UnsupportedAlgorithm(f"unsupported JWT alg {header_doc.get('alg')!r}")
    expected = _hmac256(mac_key, head + b"." + payload)
    mac_ok = hmac.compare_digest(expected, tag)
    try:
        claims = ClaimSet.from_map(payload_doc)
    except InvalidClaims as exc:
        raise MalformedToken(str(exc)) from exc
    return mac_ok, claims


def _verify_cwt(wire: bytes, mac_key: bytes) -> tuple[bool, ClaimSet]:
    try:
        outer = codec.decode_cbor(wire)
    except codec.CborDecodeError as exc:
        raise UnknownFormat(f"not a JWT or CWT: {exc}") from exc
    if not (
        isinstance(outer, list)
        and len(outer) == 4
        and isinstance(outer[0], bytes)
        and isinstance(outer[1], dict)
        and isinstance(outer[2], bytes)
        and isinstance(outer[3], bytes)
    ):
        raise MalformedToken("CWT outer structure is not [protected, unprotected, payload, tag]")
    protected, _unprotected, payload, tag = outer
    try:
        header_doc = codec.decode_cbor(protected)
        payload_doc = codec.decode_cbor(payload)
    except codec.CborDecodeError as exc:
        raise MalformedToken(f"bad CWT segment: {exc}") from exc
    if not isinstance(header_doc, dict) or header_doc.get("alg") != HS256:
        raise UnsupportedAlgorithm(f"unsupported CWT alg {header_doc!r}")
    if not isinstance(payload_doc, dict):
        raise MalformedToken("CWT payload is not a claim map")
    expected = _mac0_tag(mac_key, protected, payload)
    mac_ok = hmac.compare_digest(expected, tag)
    try:
        claims = ClaimSet.from_map(payload_doc)
    except InvalidClaims as exc:
        raise MalformedToken(str(exc)) from exc
    return mac_ok, claims


def token_confirmation_key(wire: bytes) -> CoseKey | None:
    """Extract the cnf key carried by a CWT, if any. Does not verify protection."""
    try:
        outer = codec.decode_cbor(wire)
        payload_doc = codec.decode_cbor(outer[2])
        cnf = payload_doc.get("cnf")
    except (codec.CborDecodeError, TypeError, IndexError, AttributeError):
        return None
    if not isinstance(cnf, dict) or "COSE_Key" not in cnf:
        return None
    try:
        return CoseKey.from_map(cnf["COSE_Key"])
    except TokenError:
        return None


def cose_mac_wrap(payload: bytes, key: CoseKey, kid: str) -> bytes:
    """Wrap a payload in an integrity-only MAC0 structure; kid names the MAC key."""
    mac_key = _require_mac_key(key)
    tag = _mac0_tag(mac_key, _CWT_PROTECTED, payload)
    return codec.encode_cbor([_CWT_PROTECTED, {"kid": kid}, payload, tag])


def cose_mac_unwrap(wire: bytes, key_lookup: Callable[[str], CoseKey]) -> tuple[str, bytes]:
    """Unwrap and verify a MAC0 structure; returns (kid, payload)."""
    try:
        outer = codec.decode_cbor(wire)
    except codec.CborDecodeError as exc:
        raise MalformedToken(f"bad COSE structure: {exc}") from exc
    if not (
        isinstance(outer, list)
        and len(outer) == 4
        and isinstance(outer[0], bytes)
        and isinstance(outer[1], dict)
        and isinstance(outer[2], bytes)
        and isinstance(outer[3], bytes)
    ):
        raise MalformedToken("COSE outer structure is not [protected, unprotected, payload, tag]")
    protected, unprotected, payload, tag = outer
    kid = unprotected.get("kid")
    if not isinstance(kid, str) or not kid:
        raise MalformedToken("COSE unprotected header lacks kid")
    key = key_lookup(kid)
    mac_key = _require_mac_key(key)
    if not hmac.compare_digest(_mac0_tag(mac_key, protected, payload), tag):
        raise MacMismatch("COSE MAC does not verify")
    return kid, payload


class GrantType(Enum):
    CLIENT_CREDENTIALS = "client_credentials"
    PASSWORD = "password"
    SYMMETRIC_KEY = "symmetric_key"
    REFRESH_TOKEN = "refresh_token"


@dataclass
class GrantRequest:
    grant_type: GrantType
    client_id: str
    aud: str
    client_secret: str | None = None
    scope: list[str] | None = None
    refresh_material: bytes | None = None
    pop_key: CoseKey | None = None

    def validate(self) -> None:
        if self.grant_type is GrantType.CLIENT_CREDENTIALS and not self.client_secret:
            raise BadCredentials("client_credentials grant requires client_secret")
        if self.grant_type is GrantType.REFRESH_TOKEN and not self.refresh_material:
            raise BadCredentials("refresh_token grant requires refresh material")

    @classmethod
    def from_body(cls, body: Mapping[str, Any]) -> "GrantRequest":
        """Build from a decoded JSON/CBOR request document."""
        raw_grant = body.get("grant_type")
        try:
            grant = GrantType(raw_grant)
        except ValueError:
            raise UnsupportedGrantType(f"unknown grant_type {raw_grant!r}") from None
        scope = body.get("scope")
        if isinstance(scope, str):
            scope = scope.split()
        pop_key = None
        cnf = body.get("cnf")
        if isinstance(cnf, dict) and "COSE_Key" in cnf:
            pop_key = CoseKey.from_map(cnf["COSE_Key"])
        refresh = body.get("refresh_material")
        request = cls(
            grant_type=grant,
            client_id=str(body.get("client_id", "")),
            aud=str(body.get("aud", "")),
            client_secret=body.get("client_secret"),
            scope=list(scope) if scope is not None else None,
            refresh_material=_opt_bytes(refresh),
            pop_key=pop_key,
        )
        request.validate()
        return request


@dataclass
class TokenResponse:
    access_token: bytes | str
    expires_in: int
    token_type: str = "Bearer"
    profile: str | None = None
    csp: str | None = None
    cnf: CoseKey | None = None

    def to_map(self, *, binary: bool) -> dict[str, Any]:
        token = self.access_token
        if isinstance(token, str):
            rendered: Any = token
        else:
            rendered = token if binary else codec.base64url_encode(token)
        out: dict[str, Any] = {"access_token": rendered, "token_type": self.token_type}
        if self.profile is not None:
            out["profile"] = self.profile
        if self.csp is not None:
            out["csp"] = self.csp
        out["expires_in"] = self.expires_in
        if self.cnf is not None:
            out["cnf"] = {"COSE_Key": self.cnf.to_map(binary=binary)}
        return out


@dataclass
class ClientEntry:
    """Directory row for one registered client; the secret is kept only as a salted hash."""

    client_id: str
    secret_salt: bytes
    secret_hash: bytes
    allowed_grant_types: frozenset[str]
    allowed_audiences: frozenset[str]
    default_scope: tuple[str, ...]
    token_ttl: int | None = None
    authorities: str | None = None
    is_admin: bool = False

    @staticmethod
    def hash_secret(salt: bytes, secret: str) -> bytes:
        return hashlib.sha256(salt + secret.encode("utf-8")).digest()

    @classmethod
    def with_secret(
        cls,
        client_id: str,
        secret: str,
        *,
        allowed_grant_types: tuple[str, ...] = (
            "client_credentials",
            "password",
            "symmetric_key",
            "refresh_token",
        ),
        allowed_audiences: tuple[str, ...] = ("*",),
        default_scope: tuple[str, ...] = ("read",),
        token_ttl: int | None = None,
        authorities: str | None = None,
        is_admin: bool = False,
    ) -> "ClientEntry":
        salt = secrets.token_bytes(16)
        return cls(
            client_id=client_id,
            secret_salt=salt,
            secret_hash=cls.hash_secret(salt, secret),
            allowed_grant_types=frozenset(allowed_grant_types),
            allowed_audiences=frozenset(allowed_audiences),
            default_scope=tuple(default_scope),
            token_ttl=token_ttl,
            authorities=authorities,
            is_admin=is_admin,
        )

    def verify_secret(self, secret: str) -> bool:
        return hmac.compare_digest(
            self.hash_secret(self.secret_salt, secret), self.secret_hash
        )

    def allows_audience(self, aud: str) -> bool:
        return bool(aud) and ("*" in self.allowed_audiences or aud in self.allowed_audiences)


class ClientDirectory:
    """Registered clients keyed by client_id."""

    def __init__(self, entries: list[ClientEntry] | None = None):
        self._entries: dict[str, ClientEntry] = {}
        for entry in entries or []:
            self.add(entry)

    def add(self, entry: ClientEntry) -> None:
        self._entries[entry.client_id] = entry

    def get(self, client_id: str) -> ClientEntry | None:
        return self._entries.get(client_id)

    def __iter__(self):
        return iter(self._entries.values())


def issue_bound_token(
    entry: ClientEntry,
    *,
    aud: str,
    scope: tuple[str, ...] | None,
    cnf: CoseKey,
    issuer_key: CoseKey,
    now: int,
    user_name: str | None = None,
    profile: str | None = None,
    csp: str | None = None,
) -> TokenResponse:
    """Issue a CWT for an authenticated client, bound to the given cnf key."""
    ttl = entry.token_ttl if entry.token_ttl is not None else DEFAULT_TOKEN_TTL
    claims = ClaimSet(
        aud=aud,
        scope=list(scope) if scope else list(entry.default_scope),
        exp=now + ttl,
        jti=new_jti(),
        client_id=entry.client_id,
        user_name=user_name,
        iat=now,
        authorities=entry.authorities,
    )
    token = issue_cwt(claims, cnf, issuer_key, now)
    return TokenResponse(
        access_token=token.wire,
        expires_in=ttl,
        profile=profile,
        csp=csp,
        cnf=cnf,
    )


def handle_grant(
    request: GrantRequest,
    issuer_key: CoseKey,
    client_registry: ClientDirectory,
    now: int,
) -> TokenResponse:
    """Authenticate the grant request and issue a fresh CWT bound to a cnf key."""
    request.validate()
    entry = client_registry.get(request.client_id)
    if entry is None:
        raise UnknownClient(f"unknown client {request.client_id!r}")
    if request.grant_type.value not in entry.allowed_grant_types:
        raise UnsupportedGrantType(
            f"grant {request.grant_type.value!r} not allowed for {request.client_id!r}"
        )
    if not entry.allows_audience(request.aud):
        raise InvalidAudience(f"audience {request.aud!r} not allowed for {request.client_id!r}")

    user_name: str | None = None
    if request.grant_type in (
        GrantType.CLIENT_CREDENTIALS,
        GrantType.PASSWORD,
        GrantType.SYMMETRIC_KEY,
    ):
        if not request.client_secret or not entry.verify_secret(request.client_secret):
            raise BadCredentials(f"bad credentials for {request.client_id!r}")
        if request.grant_type is GrantType.PASSWORD:
            user_name = request.client_id
        cnf = new_symmetric_key(
            KeyType.SYMMETRIC
            if request.grant_type is GrantType.SYMMETRIC_KEY
            else KeyType.OCT
        )
    else:  # refresh_token
        assert request.refresh_material is not None
        try:
            verify_token(request.refresh_material, issuer_key, now)
        except TokenError as exc:
            raise BadCredentials(f"refresh material rejected: {exc}") from exc
        cnf = request.pop_key if request.pop_key is not None else new_symmetric_key()

    if request.grant_type is GrantType.SYMMETRIC_KEY:
        profile, csp = "coap_dtls", None
    elif request.grant_type is GrantType.CLIENT_CREDENTIALS:
        profile, csp = None, "DTLS"
    else:
        profile, csp = None, None
    return issue_bound_token(
        entry,
        aud=request.aud,
        scope=tuple(request.scope) if request.scope else None,
        cnf=cnf,
        issuer_key=issuer_key,
        now=now,
        user_name=user_name,
        profile=profile,
        csp=csp,
    )
