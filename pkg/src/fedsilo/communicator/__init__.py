from .frames import (
    FAILED,
    OK,
    Hello,
    Inline,
    ObjectRef,
    PayloadRef,
    ResultEnvelope,
    TaskEnvelope,
    decode_frame,
    encode_frame,
)
from .store import (
    DEFAULT_INLINE_THRESHOLD,
    FileSystemStore,
    MemoryStore,
    ObjectStore,
    S3Store,
    make_payload,
    offload,
    open_store,
    payload_key,
    resolve_payload,
)
from .transport import (
    DEFAULT_TIMEOUT,
    InProcessChannel,
    InProcessTransport,
    PendingResult,
    TcpChannel,
    TcpTransport,
    wait_all,
)


def dispatch(transport, endpoint_id, envelope):
    """Send ``envelope`` to one endpoint; returns a :class:`PendingResult`."""
    return transport.dispatch(endpoint_id, envelope)
