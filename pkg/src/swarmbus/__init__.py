"""A privacy-by-design integration bus for multi-institution workflows."""

from .bus import Bus
from .errors import SwarmError
from .ledger import PrivacyLedger
from .model import SwarmDescriptor, load_descriptor
from .verifier import verify

__all__ = ["Bus", "PrivacyLedger", "SwarmDescriptor", "SwarmError", "load_descriptor", "verify"]
