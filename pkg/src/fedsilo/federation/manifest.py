"""Federation roster: group identity, members and registered endpoints.

The manifest JSON never contains the signing secret; it lives next to the
manifest in ``<group_id>.secret`` (hex, mode 0600).
"""

from __future__ import annotations

import json
import os
import secrets
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import DuplicateMember, NotAMember

OWNER = "Owner"
MEMBER = "Member"


@dataclass(frozen=True)
class Member:
    identity: str
    email: str
    role: str = MEMBER


@dataclass(frozen=True)
class EndpointRecord:
    endpoint_id: str
    owner_identity: str
    dataloader_name: str
    address: str = ""


@dataclass
class FederationManifest:
    group_id: str
    members: list[Member]
    endpoints: list[EndpointRecord] = field(default_factory=list)
    signing_secret: bytes = field(default=b"", repr=False)

    def member(self, identity: str) -> Member | None:
        for m in self.members:
            if m.identity == identity:
                return m
        return None

    def is_member(self, identity: str) -> bool:
        return self.member(identity) is not None

    @property
    def owner(self) -> Member:
        return next(m for m in self.members if m.role == OWNER)

    def endpoint(self, endpoint_id: str) -> EndpointRecord:
        for e in self.endpoints:
            if e.endpoint_id == endpoint_id:
                return e
        raise KeyError(endpoint_id)

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "members": [asdict(m) for m in self.members],
            "endpoints": [asdict(e) for e in self.endpoints],
        }

    @classmethod
    def from_dict(cls, d: dict, signing_secret: bytes = b"") -> "FederationManifest":
        manifest = cls(
            d["group_id"],
            [Member(**m) for m in d["members"]],
            [EndpointRecord(**e) for e in d.get("endpoints", [])],
            signing_secret,
        )
        manifest.validate()
        return manifest

    def validate(self):
        owners = [m for m in self.members if m.role == OWNER]
        if len(owners) != 1:
            raise ValueError(f"a federation has exactly one Owner, found {len(owners)}")
        identities = [m.identity for m in self.members]
        if len(set(identities)) != len(identities):
            raise DuplicateMember("member identities must be unique")
        ids = [e.endpoint_id for e in self.endpoints]
        if len(set(ids)) != len(ids):
            raise ValueError("endpoint ids must be unique")
        for e in self.endpoints:
            if not self.is_member(e.owner_identity):
                raise NotAMember(f"endpoint {e.endpoint_id} is owned by non-member {e.owner_identity!r}")


def create_federation(owner_identity: str, email: str) -> FederationManifest:
    if not owner_identity:
        raise ValueError("owner identity must be nonempty")
    return FederationManifest(
        str(uuid.uuid4()), [Member(owner_identity, email, OWNER)], [], secrets.token_bytes(32)
    )


def add_member(manifest: FederationManifest, identity: str, email: str) -> FederationManifest:
    if not identity:
        raise ValueError("identity must be nonempty")
    if manifest.is_member(identity):
        raise DuplicateMember(identity)
    manifest.members.append(Member(identity, email, MEMBER))
    return manifest


def register_endpoint(manifest: FederationManifest, owner_identity: str, dataloader_name: str,
                      address: str = "") -> EndpointRecord:
    if not manifest.is_member(owner_identity):
        raise NotAMember(owner_identity)
    record = EndpointRecord(str(uuid.uuid4()), owner_identity, dataloader_name, address)
    manifest.endpoints.append(record)
    return record


def secret_path(manifest_path, group_id: str) -> Path:
    return Path(manifest_path).parent / f"{group_id}.secret"


def save_manifest(manifest: FederationManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    spath = secret_path(path, manifest.group_id)
    fd = os.open(spath, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(manifest.signing_secret.hex() + "\n")
    os.chmod(spath, 0o600)
    return path


def load_manifest(path, with_secret: bool = True) -> FederationManifest:
    path = Path(path)
    data = json.loads(path.read_text())
    secret = b""
    if with_secret:
        secret = bytes.fromhex(secret_path(path, data["group_id"]).read_text().strip())
    return FederationManifest.from_dict(data, secret)
