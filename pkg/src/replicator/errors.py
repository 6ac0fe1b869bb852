"""Exception hierarchy shared across the package."""


class ReplicatorError(Exception):
    """Base class for every error raised by this package."""


class GraphError(ReplicatorError):
    """Graph construction or evaluation failure."""


class ShapeError(GraphError):
    """Operand shapes invalid for an op kind."""


class NotDifferentiableError(GraphError):
    """Reverse-mode differentiation hit an op kind with no gradient."""


class UnstitchedGraphError(GraphError):
    """A cross-replica placeholder was executed before stitching."""


class EvaluationError(GraphError):
    """Runtime failure while executing a finalized graph."""


class VariableError(ReplicatorError):
    """Variable resource conflict (shape mismatch on an existing name)."""


class ConfigurationError(ReplicatorError):
    """Invalid deployment topology or experiment configuration."""


class TransportError(ReplicatorError):
    """Base class for message-passing failures."""


class PeerUnreachableError(TransportError):
    """Could not establish a connection to a peer after bounded retries."""


class PeerDeadError(TransportError):
    """The peer was declared dead (disconnect or missed heartbeats)."""


class DeliveryError(TransportError):
    """A send could not be delivered; the caller keeps running."""


class RecvTimeoutError(TransportError):
    """recv() exceeded its timeout without a matching message."""


class WireProtocolError(TransportError):
    """Malformed frame or per-connection sequence regression."""


class CollectiveError(ReplicatorError):
    """A collective operation failed on this rank."""


class ProtocolError(CollectiveError):
    """Ranks disagreed on label, kind, shape, or label reuse."""


class CollectiveAbortedError(CollectiveError):
    """Another rank aborted the collective (typically after a peer death)."""


class StitchError(ReplicatorError):
    """Replica subgraphs could not be welded into one program."""


class ParamServerError(ReplicatorError):
    """Parameter-server push/pull failure."""


class EndOfInputError(ReplicatorError):
    """Raised by input pipelines on exhaustion; stops run loops cleanly."""
