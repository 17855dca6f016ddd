"""Spatio-temporal access control for location data streams.

Owners attach policies written in a small construct-chain language
(``What(d).Where(LA, NOT HOME).When(WorkingHours).Whom(u)``) to their
streams; other users' range queries are answered only with the records those
policies allow.
"""

from .geometry import BoundingBox, GeoPoint, GeometryError, Polygon
from .policy_engine import ConstraintSet, PolicyConflict, compile_policy, merge_policies
from .policy_lang import KeywordRegistry, PolicyError, PolicySyntaxError, format_policy, parse_policy
from .service import AccessControlService, QueryRequest, QueryResponse
from .store import DataRecord, Store
from .temporal import IntervalSet, RecurrenceRule, TimeWindow

__version__ = "1.0.0"

__all__ = [
    "AccessControlService",
    "BoundingBox",
    "ConstraintSet",
    "DataRecord",
    "GeoPoint",
    "GeometryError",
    "IntervalSet",
    "KeywordRegistry",
    "Polygon",
    "PolicyConflict",
    "PolicyError",
    "PolicySyntaxError",
    "QueryRequest",
    "QueryResponse",
    "RecurrenceRule",
    "Store",
    "TimeWindow",
    "compile_policy",
    "format_policy",
    "merge_policies",
    "parse_policy",
]
