"""Exception types shared across the fog, cloud and analysis modules."""


class SoaFogError(Exception):
    """Base class for every error raised by this package."""

    status = 500
    reason = "internal"


# -- geodata -----------------------------------------------------------------

class LayerSyntaxError(SoaFogError):
    """Malformed layer document (bad JSON, bad header, wrong structure)."""

    status = 400
    reason = "syntax"

    def __init__(self, message, feature_index=None):
        if feature_index is not None:
            message = f"feature {feature_index}: {message}"
        super().__init__(message)
        self.feature_index = feature_index


class ValidationError(SoaFogError):
    status = 400
    reason = "invalid"

    def __init__(self, message, feature_index=None):
        if feature_index is not None:
            message = f"feature {feature_index}: {message}"
        super().__init__(message)
        self.feature_index = feature_index


class EmptyLayer(SoaFogError):
    status = 400
    reason = "empty_layer"


class UnknownLayer(SoaFogError):
    status = 404
    reason = "unknown_layer"

    def __init__(self, layer_id, evicted=False):
        super().__init__(f"unknown layer: {layer_id}")
        self.layer_id = layer_id
        self.evicted = evicted


class KindMismatch(SoaFogError):
    status = 400
    reason = "kind_mismatch"


# -- overlay -----------------------------------------------------------------

class NonConvexClip(SoaFogError):
    status = 400
    reason = "non_convex_clip"


class DuplicateKey(SoaFogError):
    status = 400
    reason = "duplicate_key"

    def __init__(self, value):
        super().__init__(f"duplicate join key value: {value!r}")
        self.value = value


class MissingKey(SoaFogError):
    status = 400
    reason = "missing_key"


class OversizeImage(SoaFogError):
    status = 400
    reason = "oversize_image"


# -- security ----------------------------------------------------------------

class BadCredentials(SoaFogError):
    status = 401
    reason = "bad_credentials"

    def __init__(self):
        super().__init__("bad credentials")


class LockedOut(SoaFogError):
    status = 403
    reason = "locked_out"


class Unauthorized(SoaFogError):
    status = 403
    reason = "unauthorized"


class InvalidChange(SoaFogError):
    status = 400
    reason = "invalid_change"


class BadKeyLength(SoaFogError):
    status = 400
    reason = "bad_key_length"


# -- fog tier ----------------------------------------------------------------

class UnknownProcess(SoaFogError):
    status = 400
    reason = "unknown_process"


class ParamError(SoaFogError):
    status = 400
    reason = "param_error"

    def __init__(self, param, detail=None):
        super().__init__(param if detail is None else f"{param}: {detail}")
        self.param = param


class MissingAttr(SoaFogError):
    status = 400
    reason = "missing_attr"


class StorageFull(SoaFogError):
    status = 507
    reason = "storage_full"


class BudgetUnsatisfiable(SoaFogError):
    reason = "budget_unsatisfiable"


class LinkDown(SoaFogError):
    """The network path to the peer is unavailable."""

    status = 503
    reason = "link_down"


class Nack(SoaFogError):
    """The peer answered but refused the item."""

    reason = "nack"

    def __init__(self, status, reason):
        super().__init__(f"rejected with {status}: {reason}")
        self.status = status
        self.reason = reason


# -- cloud tier --------------------------------------------------------------

class UnknownNode(SoaFogError):
    status = 403
    reason = "unknown_node"


class BadMac(SoaFogError):
    status = 401
    reason = "bad_mac"


class MalformedItem(SoaFogError):
    status = 400
    reason = "malformed_item"


# -- simnet ------------------------------------------------------------------

class ConfigError(SoaFogError):
    status = 400
    reason = "config_error"


class WorkloadMismatch(SoaFogError):
    reason = "workload_mismatch"


# -- request handling ----------------------------------------------------------

class MalformedRequest(SoaFogError):
    status = 400
    reason = "malformed"


class RouteNotFound(SoaFogError):
    status = 404
    reason = "not_found"


class AccessDenied(SoaFogError):
    """An authorization gate said no. ``reason`` is the gate's code."""

    status = 403

    def __init__(self, reason):
        super().__init__(f"access denied: {reason}")
        self.reason = reason
