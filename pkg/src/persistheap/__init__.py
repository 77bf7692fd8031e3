"""Persistent heap over memory-mapped backing files."""

from .errors import (
    AlreadyExistsError,
    AuditError,
    CapabilityError,
    ClosedError,
    DatastoreError,
    DatastoreFormatError,
    DoubleFreeError,
    InvalidAllocationError,
    OutOfDomainError,
    OutOfSpaceError,
    PersistHeapError,
    ReadOnlyError,
)
from .manager import Manager, ManagerOptions, OpenMode
from .size_classes import SizeClassTable

__version__ = "0.1.0"

__all__ = [
    "AlreadyExistsError",
    "AuditError",
    "CapabilityError",
    "ClosedError",
    "DatastoreError",
    "DatastoreFormatError",
    "DoubleFreeError",
    "InvalidAllocationError",
    "Manager",
    "ManagerOptions",
    "OpenMode",
    "OutOfDomainError",
    "OutOfSpaceError",
    "PersistHeapError",
    "ReadOnlyError",
    "SizeClassTable",
]
