from .dataloader import DataloaderRegistry, load_spec, register_dataloader, shard_spec
from .endpoint import AUTH_REJECTED, DATALOADER_ERROR, EXECUTION_ERROR, UNKNOWN_FUNCTION, Endpoint
from .manifest import (
    MEMBER,
    OWNER,
    EndpointRecord,
    FederationManifest,
    Member,
    add_member,
    create_federation,
    load_manifest,
    register_endpoint,
    save_manifest,
)
from .tokens import AuthToken, Reject, Verdict, issue_token, verify_token
