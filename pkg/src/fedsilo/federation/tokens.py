"""Per-task HMAC-SHA256 authorization tokens.

Wire form: ``base64url(canonical claims JSON) + "." + hex(HMAC)``.
"""

from __future__ import annotations

import base64
import binascii
import enum
import hashlib
import hmac
import json
import time
from dataclasses import dataclass

from ..errors import NotAMember
from .manifest import FederationManifest


class Reject(str, enum.Enum):
    BAD_SIGNATURE = "BadSignature"
    WRONG_GROUP = "WrongGroup"
    UNKNOWN_SENDER = "UnknownSender"
    TASK_MISMATCH = "TaskMismatch"
    EXPIRED = "Expired"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Reject | None = None

    def __bool__(self):
        return self.accepted


ACCEPT = Verdict(True)


def canonical_claims(claims: dict) -> bytes:
    return json.dumps(claims, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def sign_claims(claims: dict, secret: bytes) -> str:
    return hmac.new(secret, canonical_claims(claims), hashlib.sha256).hexdigest()


@dataclass(frozen=True)
class AuthToken:
    claims: dict
    signature: str

    def encode(self) -> str:
        body = base64.urlsafe_b64encode(canonical_claims(self.claims)).rstrip(b"=").decode("ascii")
        return f"{body}.{self.signature}"

    def __str__(self):
        return self.encode()

    @classmethod
    def parse(cls, text: str) -> "AuthToken":
        body, sep, sig = text.partition(".")
        if not sep:
            raise ValueError("token has no signature part")
        try:
            raw = base64.urlsafe_b64decode(body + "=" * (-len(body) % 4))
            claims = json.loads(raw.decode("ascii"))
        except (binascii.Error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"unreadable token claims: {exc}") from None
        if not isinstance(claims, dict):
            raise ValueError("token claims must be an object")
        return cls(claims, sig)


def issue_token(manifest: FederationManifest, sender: str, task_id: str, round_index: int,
                ttl: float, now: float | None = None) -> AuthToken:
    if not manifest.is_member(sender):
        raise NotAMember(sender)
    now = time.time() if now is None else now
    claims = {
        "group_id": manifest.group_id,
        "sender": sender,
        "task_id": task_id,
        "round": int(round_index),
        "expiry": now + ttl,
    }
    return AuthToken(claims, sign_claims(claims, manifest.signing_secret))


def verify_token(manifest: FederationManifest, token, expected_task_id: str,
                 now: float | None = None, leeway: float = 0.0) -> Verdict:
    """Check a token against the manifest.

    ``leeway`` extends the expiry to tolerate clock skew between hosts.
    """
    if isinstance(token, str):
        try:
            token = AuthToken.parse(token)
        except ValueError:
            return Verdict(False, Reject.BAD_SIGNATURE)
    expected = sign_claims(token.claims, manifest.signing_secret)
    if not hmac.compare_digest(expected, str(token.signature)):
        return Verdict(False, Reject.BAD_SIGNATURE)
    claims = token.claims
    if claims.get("group_id") != manifest.group_id:
        return Verdict(False, Reject.WRONG_GROUP)
    if not manifest.is_member(claims.get("sender")):
        return Verdict(False, Reject.UNKNOWN_SENDER)
    if claims.get("task_id") != expected_task_id:
        return Verdict(False, Reject.TASK_MISMATCH)
    now = time.time() if now is None else now
    expiry = claims.get("expiry")
    if not isinstance(expiry, (int, float)) or not now < expiry + leeway:
        return Verdict(False, Reject.EXPIRED)
    return ACCEPT
