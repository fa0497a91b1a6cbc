"""Exception hierarchy shared by all protocol layers."""


class SpdmError(Exception):
    """Base class for every error raised by this package."""


# -- wire codec --------------------------------------------------------------

class MalformedMessage(SpdmError):
    """Input bytes are truncated, overlong, or structurally inconsistent."""


class UnsupportedRequest(SpdmError):
    """Message code byte is not in the registered code table."""


class VersionMismatch(SpdmError):
    """Header version byte unknown, or no common protocol version."""


class EncodingOverflow(SpdmError):
    """A field exceeds its length-prefix capacity."""


# -- crypto ------------------------------------------------------------------

class KeyAlgorithmMismatch(SpdmError):
    """Key type does not match the requested signature algorithm."""


class InvalidPoint(SpdmError):
    """Peer DHE public value is not a valid group element."""


class DecryptError(SpdmError):
    """AEAD tag or associated-data check failed."""


class LengthExceeded(SpdmError):
    """Requested HKDF output longer than 255 * hash_len."""


class UntrustedRoot(SpdmError):
    """Certificate chain root is not the trusted root."""


class BrokenLink(SpdmError):
    """A certificate in the chain is not signed by its predecessor."""


# -- session -----------------------------------------------------------------

class UnknownCheckpoint(SpdmError):
    """Transcript checkpoint name was never recorded."""


class MissingHandshakeSecret(SpdmError):
    """Key-schedule step invoked before its inputs were derived."""


class InvalidPhase(SpdmError):
    """Operation not legal in the current protocol or session phase."""


class SequenceExhausted(SpdmError):
    """Record sequence number would wrap."""


class ReplayDetected(SpdmError):
    """Record sequence number lower than expected."""


class SequenceGap(SpdmError):
    """Record sequence number higher than expected."""


# -- requester / responder ---------------------------------------------------

class AlgorithmMismatch(SpdmError):
    """No common algorithm in at least one negotiated category."""


class SignatureInvalid(SpdmError):
    """A protocol signature failed verification."""


class VerifyDataMismatch(SpdmError):
    """Handshake confirmation HMAC did not match."""


class VerifyNewKeyFailed(SpdmError):
    """Post-update key confirmation exchange failed."""


class DigestMismatch(SpdmError):
    """Retrieved data does not hash to the advertised digest."""


class NonceMismatch(SpdmError):
    """Responder reused a nonce within one connection."""


class UnknownPskHint(SpdmError):
    """PSK hint absent from the pre-shared-key table."""


class ResponderError(SpdmError):
    """Responder answered with an Error message.

    Carries the wire error code (int) and detail bytes.
    """

    def __init__(self, code, detail=b""):
        super().__init__(f"responder error {code!r} detail={detail!r}")
        self.code = code
        self.detail = detail


class DuplicateOpcode(SpdmError):
    """Application opcode already has a registered handler."""


class InvalidSlot(SpdmError):
    """Certificate slot index outside 0..7."""


class NonContiguousMeasurementIndex(SpdmError):
    """Measurement indices must be contiguous starting at 1."""


# -- transport ---------------------------------------------------------------

class CapacityExceeded(SpdmError):
    """Message larger than the channel buffer or frame limit."""


class ChannelClosed(SpdmError):
    """Peer endpoint is gone."""


class TransportTimeout(SpdmError):
    """No message arrived within the timeout."""


# -- devices -----------------------------------------------------------------

class RangeError(SpdmError):
    """Block request beyond device capacity."""


# -- bench -------------------------------------------------------------------

class InsufficientSamples(SpdmError):
    """Statistics need at least two samples."""
