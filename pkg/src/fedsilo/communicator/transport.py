"""Server-side task dispatch and endpoint-side channels.

Two transports share one contract: ``dispatch`` hands a task to one
endpoint and returns a :class:`PendingResult`. Every envelope crosses the
transport as an encoded frame, so in-process runs exercise the same codec
as TCP runs.

TCP endpoints dial the server (``--connect``) by default; the server can
also dial endpoints that listen (``--listen``). Either way the endpoint
speaks first with a ``Hello`` frame.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from typing import Iterable

from ..errors import DispatchTimeout, DuplicateTask, EndpointUnknown, EndpointUnreachable, TransportError
from .frames import Hello, ResultEnvelope, TaskEnvelope, decode_frame, encode_frame, read_frame

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0


class PendingResult:
    def __init__(self, task_id: str, endpoint_id: str):
        self.task_id = task_id
        self.endpoint_id = endpoint_id
        self.dispatched_at = time.time()
        self._event = threading.Event()
        self._result: ResultEnvelope | None = None
        self._error: BaseException | None = None

    def _resolve(self, result=None, error=None):
        if self._event.is_set():
            return
        self._result, self._error = result, error
        self._event.set()

    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = DEFAULT_TIMEOUT) -> ResultEnvelope:
        if not self._event.wait(timeout):
            raise DispatchTimeout(f"task {self.task_id} on {self.endpoint_id} timed out after {timeout}s")
        if self._error is not None:
            raise self._error
        return self._result


def wait_all(handles: Iterable[PendingResult], deadline: float):
    """Block until every handle resolves or ``deadline`` (time.monotonic) passes.

    Returns ``(results, missing, errors)``: results keyed by task id, the
    handles that timed out, and transport errors keyed by task id.
    """
    results, missing, errors = {}, [], {}
    for h in handles:
        try:
            results[h.task_id] = h.wait(max(0.0, deadline - time.monotonic()))
        except DispatchTimeout:
            missing.append(h)
        except TransportError as exc:
            errors[h.task_id] = exc
    return results, missing, errors


class _Dispatcher:
    """Pending-result bookkeeping shared by both transports."""

    def __init__(self):
        self._lock = threading.Lock()
        self._pending: dict[str, PendingResult] = {}
        self._dispatched: set[str] = set()
        self.default_timeout = DEFAULT_TIMEOUT

    def _register(self, endpoint_id: str, task_id: str) -> PendingResult:
        with self._lock:
            if task_id in self._dispatched:
                raise DuplicateTask(f"task {task_id} was already dispatched")
            self._dispatched.add(task_id)
            handle = PendingResult(task_id, endpoint_id)
            self._pending[task_id] = handle
            return handle

    def _deliver(self, result: ResultEnvelope):
        with self._lock:
            handle = self._pending.pop(result.task_id, None)
        if handle is None:
            log.warning("dropping result for unknown or finished task %s", result.task_id)
            return
        handle._resolve(result=result)

    def _fail_endpoint(self, endpoint_id: str, error: BaseException):
        with self._lock:
            doomed = [t for t, h in self._pending.items() if h.endpoint_id == endpoint_id]
            handles = [self._pending.pop(t) for t in doomed]
        for h in handles:
            h._resolve(error=error)


# --------------------------------------------------------------------------
# in-process

_CLOSED = object()


class InProcessChannel:
    def __init__(self, transport: "InProcessTransport", endpoint_id: str):
        self.endpoint_id = endpoint_id
        self._transport = transport
        self._inbox: queue.Queue = queue.Queue()

    def receive(self, timeout: float | None = None) -> TaskEnvelope | None:
        """Next task, or ``None`` once the transport is closed."""
        item = self._inbox.get(timeout=timeout)
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            return None
        return decode_frame(item)

    def send(self, result: ResultEnvelope):
        self._transport._deliver(decode_frame(encode_frame(result)))

    def close(self):
        self._inbox.put(_CLOSED)


class InProcessTransport(_Dispatcher):
    def __init__(self):
        super().__init__()
        self._channels: dict[str, InProcessChannel] = {}

    def attach(self, endpoint_id: str) -> InProcessChannel:
        with self._lock:
            if endpoint_id in self._channels:
                raise ValueError(f"endpoint {endpoint_id} is already attached")
            channel = InProcessChannel(self, endpoint_id)
            self._channels[endpoint_id] = channel
            return channel

    def connected(self) -> set[str]:
        with self._lock:
            return set(self._channels)

    def wait_ready(self, endpoint_ids, timeout: float) -> set[str]:
        return set(endpoint_ids) - self.connected()

    def dispatch(self, endpoint_id: str, envelope: TaskEnvelope) -> PendingResult:
        channel = self._channels.get(endpoint_id)
        if channel is None:
            raise EndpointUnknown(endpoint_id)
        handle = self._register(endpoint_id, envelope.task_id)
        channel._inbox.put(encode_frame(envelope))
        return handle

    def close(self):
        for channel in list(self._channels.values()):
            channel.close()


# --------------------------------------------------------------------------
# TCP


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


class _Connection:
    def __init__(self, sock: socket.socket, endpoint_id: str):
        self.sock = sock
        self.endpoint_id = endpoint_id
        self.send_lock = threading.Lock()
        self.alive = True


class TcpTransport(_Dispatcher):
    """Server side of the TCP transport.

    ``endpoints`` is the set of endpoint ids allowed to connect; any other
    id is refused at the hello.
    """

    def __init__(self, endpoints: Iterable[str], listen: str | None = "127.0.0.1:0"):
        super().__init__()
        self.expected = set(endpoints)
        self._conns: dict[str, _Connection] = {}
        self._changed = threading.Condition(self._lock)
        self._server_sock = None
        self._closed = False
        if listen is not None:
            host, port = parse_address(listen)
            self._server_sock = socket.create_server((host, port), reuse_port=False)
            threading.Thread(target=self._accept_loop, name="fedsilo-accept", daemon=True).start()

    @property
    def address(self) -> str:
        host, port = self._server_sock.getsockname()[:2]
        return f"{host}:{port}"

    def _accept_loop(self):
        while not self._closed:
            try:
                sock, _ = self._server_sock.accept()
            except OSError:
                return
            threading.Thread(target=self._handshake, args=(sock,), daemon=True).start()

    def _handshake(self, sock: socket.socket):
        try:
            sock.settimeout(10.0)
            hello = read_frame(sock)
            sock.settimeout(None)
        except Exception as exc:  # noqa: BLE001 - any bad peer is just dropped
            log.warning("dropping connection with bad hello: %s", exc)
            sock.close()
            return
        if not isinstance(hello, Hello) or hello.endpoint_id not in self.expected:
            log.warning("refusing endpoint %r", getattr(hello, "endpoint_id", hello))
            sock.close()
            return
        self._adopt(sock, hello.endpoint_id)

    def _adopt(self, sock, endpoint_id):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = _Connection(sock, endpoint_id)
        with self._changed:
            old = self._conns.get(endpoint_id)
            self._conns[endpoint_id] = conn
            self._changed.notify_all()
        if old is not None:
            old.alive = False
            old.sock.close()
        threading.Thread(target=self._reader, args=(conn,), name=f"fedsilo-read-{endpoint_id[:8]}",
                         daemon=True).start()
        log.info("endpoint %s connected", endpoint_id)

    def dial(self, endpoint_id: str, address: str, timeout: float = 30.0):
        """Connect to an endpoint started with ``--listen``."""
        if endpoint_id not in self.expected:
            raise EndpointUnknown(endpoint_id)
        sock = _connect_with_retry(address, timeout)
        sock.settimeout(10.0)
        hello = read_frame(sock)
        sock.settimeout(None)
        if not isinstance(hello, Hello) or hello.endpoint_id != endpoint_id:
            sock.close()
            raise EndpointUnreachable(f"{address} answered as {getattr(hello, 'endpoint_id', hello)!r}")
        self._adopt(sock, endpoint_id)

    def _reader(self, conn: _Connection):
        try:
            while True:
                env = read_frame(conn.sock)
                if isinstance(env, ResultEnvelope):
                    self._deliver(env)
        except (EOFError, OSError, ValueError) as exc:
            log.debug("connection to %s ended: %s", conn.endpoint_id, exc)
        conn.alive = False
        with self._changed:
            if self._conns.get(conn.endpoint_id) is conn:
                del self._conns[conn.endpoint_id]
        self._fail_endpoint(conn.endpoint_id, EndpointUnreachable(f"{conn.endpoint_id} disconnected"))

    def connected(self) -> set[str]:
        with self._lock:
            return {k for k, c in self._conns.items() if c.alive}

    def wait_ready(self, endpoint_ids, timeout: float) -> set[str]:
        """Wait for endpoints to connect; returns the ids still missing."""
        wanted = set(endpoint_ids)
        deadline = time.monotonic() + timeout
        with self._changed:
            while True:
                missing = wanted - {k for k, c in self._conns.items() if c.alive}
                remaining = deadline - time.monotonic()
                if not missing or remaining <= 0:
                    return missing
                self._changed.wait(remaining)

    def dispatch(self, endpoint_id: str, envelope: TaskEnvelope) -> PendingResult:
        if endpoint_id not in self.expected:
            raise EndpointUnknown(endpoint_id)
        conn = self._conns.get(endpoint_id)
        if conn is None or not conn.alive:
            raise EndpointUnreachable(f"endpoint {endpoint_id} is not connected")
        handle = self._register(endpoint_id, envelope.task_id)
        frame = encode_frame(envelope)
        try:
            with conn.send_lock:
                conn.sock.sendall(frame)
        except OSError as exc:
            self._fail_endpoint(endpoint_id, EndpointUnreachable(f"{endpoint_id}: {exc}"))
        return handle

    def close(self):
        self._closed = True
        if self._server_sock is not None:
            self._server_sock.close()
        with self._lock:
            conns = list(self._conns.values())
        for conn in conns:
            try:
                conn.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.sock.close()


def _connect_with_retry(address: str, timeout: float) -> socket.socket:
    host, port = parse_address(address)
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection((host, port), timeout=5.0)
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise EndpointUnreachable(f"cannot reach {address}: {exc}") from exc
            time.sleep(0.1)


class TcpChannel:
    """Endpoint side of a TCP connection."""

    def __init__(self, sock: socket.socket, endpoint_id: str):
        self.endpoint_id = endpoint_id
        self.sock = sock
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.sendall(encode_frame(Hello(endpoint_id)))

    @classmethod
    def connect(cls, address: str, endpoint_id: str, retry_for: float = 30.0) -> "TcpChannel":
        return cls(_connect_with_retry(address, retry_for), endpoint_id)

    @classmethod
    def listen(cls, address: str, endpoint_id: str, timeout: float | None = None) -> "TcpChannel":
        host, port = parse_address(address)
        with socket.create_server((host, port)) as server:
            server.settimeout(timeout)
            sock, _ = server.accept()
        return cls(sock, endpoint_id)

    def receive(self, timeout: float | None = None) -> TaskEnvelope | None:
        self.sock.settimeout(timeout)
        try:
            env = read_frame(self.sock)
        except (EOFError, ConnectionError):
            return None
        except socket.timeout:
            raise queue.Empty from None
        finally:
            try:
                self.sock.settimeout(None)
            except OSError:
                pass
        return env if isinstance(env, TaskEnvelope) else self.receive(timeout)

    def send(self, result: ResultEnvelope):
        self.sock.sendall(encode_frame(result))

    def close(self):
        self.sock.close()
