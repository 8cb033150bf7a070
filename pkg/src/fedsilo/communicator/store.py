"""Object stores and the inline-vs-offload payload policy."""

from __future__ import annotations

import datetime as _dt
import hashlib
import hmac
import os
import tempfile
import threading
import urllib.error
import urllib.parse
import urllib.request
import zlib
from pathlib import Path
from typing import Protocol

from ..errors import IntegrityFailure, ObjectMissing, StoreUnavailable
from .frames import Inline, ObjectRef, PayloadRef

DEFAULT_INLINE_THRESHOLD = 1 << 20
MAX_KEY_BYTES = 1024


class ObjectStore(Protocol):
    def put(self, key: str, data: bytes) -> None: ...

    def get(self, key: str) -> bytes: ...

    def exists(self, key: str) -> bool: ...


def _check_key(key: str) -> str:
    if not key or len(key.encode("utf-8")) > MAX_KEY_BYTES:
        raise ValueError(f"object keys must be 1..{MAX_KEY_BYTES} bytes")
    return key


class MemoryStore:
    def __init__(self):
        self._objects: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, key, data):
        with self._lock:
            self._objects[_check_key(key)] = bytes(data)

    def get(self, key):
        with self._lock:
            try:
                return self._objects[key]
            except KeyError:
                raise ObjectMissing(key) from None

    def exists(self, key):
        with self._lock:
            return key in self._objects

    def delete(self, key):
        with self._lock:
            self._objects.pop(key, None)

    def keys(self):
        with self._lock:
            return sorted(self._objects)


class FileSystemStore:
    """Objects as files under ``root``; a key's ``/`` separators become
    subdirectories."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreUnavailable(f"cannot create store root {self.root}: {exc}") from exc

    def _path(self, key: str) -> Path:
        _check_key(key)
        parts = key.split("/")
        if any(p in ("", ".", "..") for p in parts):
            raise ValueError(f"key {key!r} is not a relative path")
        return self.root.joinpath(*parts)

    def put(self, key, data):
        path = self._path(key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise StoreUnavailable(f"cannot write {key}: {exc}") from exc

    def get(self, key):
        path = self._path(key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise ObjectMissing(key) from None
        except OSError as exc:
            raise StoreUnavailable(f"cannot read {key}: {exc}") from exc

    def exists(self, key):
        return self._path(key).is_file()

    def delete(self, key):
        self._path(key).unlink(missing_ok=True)

    def keys(self):
        return sorted(
            p.relative_to(self.root).as_posix()
            for p in self.root.rglob("*")
            if p.is_file() and not p.name.startswith(".tmp-")
        )


class S3Store:
    """Path-style S3-compatible client (PUT/GET/HEAD) signed with AWS SigV4.

    Credentials come from ``FEDSILO_S3_KEY`` / ``FEDSILO_S3_SECRET`` unless
    given explicitly; without credentials requests go out unsigned.
    """

    def __init__(self, endpoint_url: str, bucket: str, access_key=None, secret_key=None,
                 region="us-east-1", timeout=30.0):
        self.endpoint_url = endpoint_url.rstrip("/")
        self.bucket = bucket
        self.access_key = access_key if access_key is not None else os.environ.get("FEDSILO_S3_KEY")
        self.secret_key = secret_key if secret_key is not None else os.environ.get("FEDSILO_S3_SECRET")
        self.region = region
        self.timeout = timeout

    def _url(self, key):
        _check_key(key)
        return f"{self.endpoint_url}/{self.bucket}/{urllib.parse.quote(key, safe='/-_.~')}"

    def _sign(self, method, url, payload: bytes, now=None) -> dict:
        now = now or _dt.datetime.now(_dt.timezone.utc)
        amz_date = now.strftime("%Y%m%dT%H%M%SZ")
        datestamp = now.strftime("%Y%m%d")
        parsed = urllib.parse.urlsplit(url)
        payload_hash = hashlib.sha256(payload).hexdigest()
        headers = {"host": parsed.netloc, "x-amz-content-sha256": payload_hash, "x-amz-date": amz_date}
        if not (self.access_key and self.secret_key):
            return headers
        signed = ";".join(sorted(headers))
        canonical = "\n".join([
            method,
            parsed.path or "/",
            parsed.query,
            "".join(f"{k}:{headers[k]}\n" for k in sorted(headers)),
            signed,
            payload_hash,
        ])
        scope = f"{datestamp}/{self.region}/s3/aws4_request"
        to_sign = "\n".join([
            "AWS4-HMAC-SHA256", amz_date, scope, hashlib.sha256(canonical.encode()).hexdigest(),
        ])
        k = f"AWS4{self.secret_key}".encode()
        for part in (datestamp, self.region, "s3", "aws4_request"):
            k = hmac.new(k, part.encode(), hashlib.sha256).digest()
        signature = hmac.new(k, to_sign.encode(), hashlib.sha256).hexdigest()
        headers["authorization"] = (
            f"AWS4-HMAC-SHA256 Credential={self.access_key}/{scope}, "
            f"SignedHeaders={signed}, Signature={signature}"
        )
        return headers

    def _request(self, method, key, data=b""):
        url = self._url(key)
        headers = self._sign(method, url, data)
        headers.pop("host")
        req = urllib.request.Request(url, data=data if method == "PUT" else None, method=method, headers=headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code == 404:
                raise ObjectMissing(key) from None
            raise StoreUnavailable(f"{method} {key}: HTTP {exc.code}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise StoreUnavailable(f"{method} {key}: {exc}") from exc

    def put(self, key, data):
        self._request("PUT", key, bytes(data))

    def get(self, key):
        return self._request("GET", key)

    def exists(self, key):
        try:
            self._request("HEAD", key)
            return True
        except ObjectMissing:
            return False


def open_store(spec: str | None):
    """``None``/``memory`` -> MemoryStore; ``http(s)://host/bucket`` -> S3Store;
    anything else is a filesystem root."""
    if spec is None or spec == "memory":
        return MemoryStore()
    if spec.startswith(("http://", "https://")):
        parsed = urllib.parse.urlsplit(spec)
        bucket = parsed.path.strip("/")
        if not bucket or "/" in bucket:
            raise ValueError(f"S3 store URL must be <endpoint>/<bucket>, got {spec!r}")
        return S3Store(f"{parsed.scheme}://{parsed.netloc}", bucket)
    if spec.startswith("file://"):
        spec = spec[len("file://"):]
    return FileSystemStore(spec)


def payload_key(data: bytes) -> str:
    return "payload/" + hashlib.sha256(data).hexdigest()


def make_payload(data: bytes, store: ObjectStore, inline_threshold: int = DEFAULT_INLINE_THRESHOLD) -> PayloadRef:
    if inline_threshold < 0:
        raise ValueError("inline_threshold must be >= 0")
    data = bytes(data)
    if len(data) <= inline_threshold:
        return Inline(data)
    return offload(data, store)


def offload(data: bytes, store: ObjectStore) -> ObjectRef:
    """Store ``data`` under its content address regardless of size."""
    key = payload_key(data)
    if not store.exists(key):
        store.put(key, data)
    return ObjectRef(key, len(data), zlib.crc32(data))


def resolve_payload(ref: PayloadRef, store: ObjectStore | None) -> bytes:
    if isinstance(ref, Inline):
        return ref.data
    if store is None:
        raise StoreUnavailable(f"no object store configured to fetch {ref.key}")
    data = store.get(ref.key)
    if len(data) != ref.size:
        raise IntegrityFailure(f"{ref.key}: {len(data)} bytes, expected {ref.size}")
    if zlib.crc32(data) != ref.crc32:
        raise IntegrityFailure(f"{ref.key}: CRC-32 mismatch")
    return data
