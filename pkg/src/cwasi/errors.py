"""Exception hierarchy shared across the runtime."""


class CwasiError(Exception):
    """Base class for all runtime errors."""


# -- function spec ------------------------------------------------------------

class MalformedConfig(CwasiError):
    """Config document is not a valid JSON object of the expected shape."""


class MissingArgs(MalformedConfig):
    """Config has an empty or missing args list."""


# -- registry -----------------------------------------------------------------

class DuplicateFunction(CwasiError):
    """A bundle with the same name is already registered."""


class ScanFailure(CwasiError):
    """The registry or snapshot root itself could not be read."""


# -- linker / binary module parsing -------------------------------------------

class UnparsableText(CwasiError):
    """Module text is too damaged for even a lenient import scan."""


class BadMagic(CwasiError):
    """Not a binary module: wrong magic bytes or unsupported version."""


class TruncatedSection(CwasiError):
    """A module section ended before its declared contents."""


class MalformedLeb128(CwasiError):
    """A variable-length integer ran past its limit or the input."""


class LinkError(CwasiError):
    """An import remained unresolved after embedding."""


class EngineError(CwasiError):
    """The execution backend failed or the guest trapped."""


# -- guest engine -------------------------------------------------------------

class OutOfBounds(CwasiError):
    """A memory span falls outside the guest's linear memory."""


class BadState(CwasiError):
    """Operation not permitted in the instance's current state."""


class BadTransition(BadState):
    """Illegal lifecycle transition."""


class AllocationFailure(CwasiError):
    """Guest memory could not be extended for a host write."""


class TruncatedEnvelope(CwasiError):
    """Dispatch envelope bytes end before the declared fields."""


class EmptyName(CwasiError):
    """Envelope source or target name is empty or contains NUL."""


class DecodeError(CwasiError):
    """Guest-supplied bytes do not decode as a dispatch envelope."""


# -- local buffer -------------------------------------------------------------

class AddressInUse(CwasiError):
    """A live receiver already owns the socket path."""


class ConnectRefused(CwasiError):
    """No receiver is listening at the socket path."""


class RequestTimeout(CwasiError, TimeoutError):
    """No reply arrived within the configured deadline."""


class FrameTooLarge(CwasiError):
    """Frame body exceeds the configured maximum size."""


class ProtocolError(CwasiError):
    """Malformed frame on the wire (bad prefix or short read)."""


class IoFailure(CwasiError):
    """Underlying filesystem or socket I/O failed."""


# -- broker -------------------------------------------------------------------

class BindFailure(CwasiError):
    """Broker could not bind its listen address."""


class BrokerUnreachable(CwasiError):
    """Could not connect to the broker address."""


# -- coordinator / bench ------------------------------------------------------

class StartupFailure(CwasiError):
    """Function startup failed; wraps the underlying cause."""


class InfraUnavailable(CwasiError):
    """Benchmark infrastructure (receiver/broker) is not reachable."""


class ZeroElapsed(CwasiError):
    """Throughput over a zero-length interval is undefined."""


class Unsupported(CwasiError):
    """Resource statistics unavailable for this process or platform."""
