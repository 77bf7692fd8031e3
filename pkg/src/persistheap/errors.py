class PersistHeapError(Exception):
    pass


class OutOfDomainError(PersistHeapError, ValueError):
    """A size lies outside the range a table or rounding rule covers."""


class DoubleFreeError(PersistHeapError, ValueError):
    pass


class InvalidAllocationError(PersistHeapError, ValueError):
    """Offset does not name the start of a live allocation."""


class OutOfSpaceError(PersistHeapError, MemoryError):
    pass


class AlreadyExistsError(PersistHeapError, FileExistsError):
    pass


class ReadOnlyError(PersistHeapError, PermissionError):
    pass


class ClosedError(PersistHeapError, RuntimeError):
    pass


class CapabilityError(PersistHeapError, OSError):
    """The platform lacks a facility this operation needs."""


class DatastoreError(PersistHeapError):
    """The datastore directory is missing or inconsistent."""


class DatastoreFormatError(DatastoreError):
    pass


class BadMagicError(DatastoreFormatError):
    pass


class VersionMismatchError(DatastoreFormatError):
    pass


class TruncatedFileError(DatastoreFormatError):
    pass


class ChecksumError(DatastoreFormatError):
    pass


class AuditError(PersistHeapError, AssertionError):
    """Management structures violate an invariant."""
