"""The token table: registration, lookup, challenge-response, revocation, purging.

All operations are atomic under one lock, so concurrent request handlers
observe a single total order. Persistence is an append-only operation log
plus point-in-time snapshots, both replayable into an identical table.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
import threading
import urllib.parse
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

from . import codec, tokens


class RegistrarError(Exception):
    pass


class DuplicateJti(RegistrarError):
    pass


class UnknownJti(RegistrarError):
    pass


class TokenNotActive(RegistrarError):
    pass


class NoChallengeOutstanding(RegistrarError):
    pass


class ChallengeExpired(RegistrarError):
    pass


class NoPopKeyBound(RegistrarError):
    pass


class TokenStatus(Enum):
    ACTIVE = "active"
    REVOKED = "revoked"
    EXPIRED = "expired"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class TokenRecord:
    jti: str
    aud: str
    client_id: str
    issued_at: int
    exp: int
    revoked: bool = False
    cnf_kid: bytes | None = None
    cnf_key: tokens.CoseKey | None = None

    def validate(self) -> None:
        if not self.jti:
            raise RegistrarError("jti must be non-empty")
        if self.exp <= self.issued_at:
            raise RegistrarError(f"exp {self.exp} must be greater than issued_at {self.issued_at}")


@dataclass(frozen=True)
class Challenge:
    jti: str
    nonce: bytes
    issued_at: int
    ttl: int


DEFAULT_CHALLENGE_TTL = 60


class Registrar:
    """In-memory token table with an optional append-only operation log."""

    def __init__(self, log_path: str | Path | None = None):
        self._lock = threading.RLock()
        self._records: dict[str, TokenRecord] = {}
        self._challenges: dict[str, Challenge] = {}
        self._log_path = Path(log_path) if log_path is not None else None

    # -- core operations --

    def register(self, record: TokenRecord) -> None:
        record.validate()
        with self._lock:
            if record.jti in self._records:
                raise DuplicateJti(f"jti {record.jti!r} already registered")
            self._records[record.jti] = record
            self._log("register", record.jti, _record_fields(record))

    def lookup(self, jti: str, now: int) -> TokenStatus:
        with self._lock:
            record = self._records.get(jti)
            if record is None:
                return TokenStatus.UNKNOWN
            if record.revoked:
                return TokenStatus.REVOKED
            if now >= record.exp:
                return TokenStatus.EXPIRED
            return TokenStatus.ACTIVE

    def get(self, jti: str) -> TokenRecord | None:
        with self._lock:
            return self._records.get(jti)

    def revoke(self, jti: str) -> None:
        with self._lock:
            record = self._records.get(jti)
            if record is None:
                raise UnknownJti(f"jti {jti!r} not registered")
            if not record.revoked:
                self._records[jti] = replace(record, revoked=True)
                self._log("revoke", jti, {})

    def purge_expired(self, now: int) -> int:
        with self._lock:
            stale = [jti for jti, rec in self._records.items() if rec.exp <= now]
            for jti in stale:
                del self._records[jti]
                self._challenges.pop(jti, None)
            if stale:
                self._log("purge", "-", {"now": str(now)})
            return len(stale)

    def jtis(self) -> list[str]:
        with self._lock:
            return list(self._records)

    # -- proof-of-possession challenges --

    def issue_challenge(self, jti: str, now: int, ttl: int = DEFAULT_CHALLENGE_TTL) -> Challenge:
        with self._lock:
            if self.lookup(jti, now) is not TokenStatus.ACTIVE:
                raise TokenNotActive(f"jti {jti!r} is not active")
            record = self._records[jti]
            if record.cnf_key is None or not record.cnf_key.k:
                raise NoPopKeyBound(f"jti {jti!r} has no symmetric cnf key bound")
            challenge = Challenge(jti=jti, nonce=secrets.token_bytes(16), issued_at=now, ttl=ttl)
            self._challenges[jti] = challenge
            return challenge

    def verify_challenge(self, jti: str, nonce: bytes, mac: bytes, now: int) -> bool:
        """True iff mac = HMAC-SHA256(cnf key, nonce). The nonce is consumed either way."""
        with self._lock:
            challenge = self._challenges.pop(jti, None)
            if challenge is None or not hmac.compare_digest(challenge.nonce, nonce):
                raise NoChallengeOutstanding(f"no outstanding challenge nonce for {jti!r}")
            if now >= challenge.issued_at + challenge.ttl:
                raise ChallengeExpired(f"challenge for {jti!r} expired")
            record = self._records.get(jti)
            if record is None or record.cnf_key is None or not record.cnf_key.k:
                raise NoPopKeyBound(f"jti {jti!r} has no symmetric cnf key bound")
            expected = hmac.new(record.cnf_key.k, nonce, hashlib.sha256).digest()
            return hmac.compare_digest(expected, mac)

    # -- persistence --

    def snapshot(self, path: str | Path) -> None:
        """Write one `token` line per live record; restorable via `restore`."""
        with self._lock:
            lines = [
                _format_line("token", rec.jti, _record_fields(rec))
                for rec in self._records.values()
            ]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def restore(cls, path: str | Path, log_path: str | Path | None = None) -> "Registrar":
        reg = cls(log_path=log_path)
        for op, jti, fields in _read_lines(path):
            if op != "token":
                raise RegistrarError(f"unexpected snapshot op {op!r}")
            reg._records[jti] = _record_from_fields(jti, fields)
        return reg

    @classmethod
    def replay(cls, log_path: str | Path) -> "Registrar":
        """Rebuild a table by replaying an operation log (does not re-append)."""
        reg = cls()
        for op, jti, fields in _read_lines(log_path):
            if op == "register" or op == "token":
                reg._records[jti] = _record_from_fields(jti, fields)
            elif op == "revoke":
                rec = reg._records.get(jti)
                if rec is not None:
                    reg._records[jti] = replace(rec, revoked=True)
            elif op == "purge":
                now = int(fields["now"])
                for stale in [j for j, r in reg._records.items() if r.exp <= now]:
                    del reg._records[stale]
            else:
                raise RegistrarError(f"unknown log op {op!r}")
        reg._log_path = Path(log_path)
        return reg

    def _log(self, op: str, jti: str, fields: dict[str, str]) -> None:
        if self._log_path is None:
            return
        with open(self._log_path, "a", encoding="utf-8") as fh:
            fh.write(_format_line(op, jti, fields))


class PeriodicPurger:
    """Background sweep calling purge_expired at a fixed interval."""

    def __init__(self, registrar: Registrar, interval: float, clock):
        self._registrar = registrar
        self._interval = interval
        self._clock = clock
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=self._interval + 1)

    def _run(self) -> None:
        while not self._stop.wait(self._interval):
            self._registrar.purge_expired(int(self._clock()))


# -- line format: op,jti,field=value,... (values percent-encoded) --


def _q(value: str) -> str:
    return urllib.parse.quote(value, safe="")


def _record_fields(rec: TokenRecord) -> dict[str, str]:
    fields = {
        "aud": rec.aud,
        "client_id": rec.client_id,
        "issued_at": str(rec.issued_at),
        "exp": str(rec.exp),
        "revoked": "1" if rec.revoked else "0",
    }
    if rec.cnf_kid is not None:
        fields["cnf_kid"] = codec.base64url_encode(rec.cnf_kid)
    if rec.cnf_key is not None:
        fields["cnf_key"] = codec.base64url_encode(
            codec.encode_cbor(rec.cnf_key.to_map(binary=True))
        )
    return fields


def _record_from_fields(jti: str, fields: dict[str, str]) -> TokenRecord:
    cnf_kid = None
    if "cnf_kid" in fields:
        cnf_kid = codec.base64url_decode(fields["cnf_kid"])
    cnf_key = None
    if "cnf_key" in fields:
        cnf_key = tokens.CoseKey.from_map(
            codec.decode_cbor(codec.base64url_decode(fields["cnf_key"]))
        )
    record = TokenRecord(
        jti=jti,
        aud=fields["aud"],
        client_id=fields["client_id"],
        issued_at=int(fields["issued_at"]),
        exp=int(fields["exp"]),
        revoked=fields.get("revoked", "0") == "1",
        cnf_kid=cnf_kid,
        cnf_key=cnf_key,
    )
    record.validate()
    return record


def _format_line(op: str, jti: str, fields: dict[str, str]) -> str:
    parts = [op, _q(jti)] + [f"{name}={_q(value)}" for name, value in fields.items()]
    return ",".join(parts) + "\n"


def _read_lines(path: str | Path):
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) < 2:
            raise RegistrarError(f"malformed log line {line!r}")
        op = parts[0]
        jti = urllib.parse.unquote(parts[1])
        fields: dict[str, str] = {}
        for part in parts[2:]:
            name, _, value = part.partition("=")
            fields[name] = urllib.parse.unquote(value)
        yield op, jti, fields
