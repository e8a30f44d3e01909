"""Authentication, layered access control (RBAC, MAC, DAC), audit and
integrity envelopes for tier-to-tier transfer.

A request is allowed only when every gate passes, evaluated in the fixed
order token -> RBAC -> MAC -> DAC. The first failing gate names the reason.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import os
import random
import secrets
import threading
import time
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Iterable, Optional

from .errors import (
    BadCredentials,
    BadKeyLength,
    InvalidChange,
    LockedOut,
    Unauthorized,
)


class Role(str, Enum):
    MOBILE_CLIENT = "mobile_client"
    THIN_CLIENT = "thin_client"
    THICK_CLIENT = "thick_client"
    ANALYST = "analyst"
    ADMIN = "admin"


class Permission(str, Enum):
    READ_CATALOG = "read_catalog"
    READ_FEATURES = "read_features"
    RENDER_MAP = "render_map"
    EXECUTE_PROCESS = "execute_process"
    WRITE_LAYER = "write_layer"
    SYNC_TO_CLOUD = "sync_to_cloud"
    MANAGE_POLICY = "manage_policy"


class SensitivityLabel(IntEnum):
    PUBLIC = 0
    RESTRICTED = 1
    CONFIDENTIAL = 2

    @classmethod
    def parse(cls, value) -> "SensitivityLabel":
        if isinstance(value, SensitivityLabel):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"unknown sensitivity label: {value!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


_CLIENT_PERMS = {Permission.READ_CATALOG, Permission.READ_FEATURES, Permission.RENDER_MAP}

DEFAULT_ROLE_PERMISSIONS: dict[Role, frozenset[Permission]] = {
    Role.MOBILE_CLIENT: frozenset(_CLIENT_PERMS),
    Role.THIN_CLIENT: frozenset(_CLIENT_PERMS),
    Role.THICK_CLIENT: frozenset(_CLIENT_PERMS | {Permission.EXECUTE_PROCESS}),
    Role.ANALYST: frozenset(_CLIENT_PERMS | {Permission.EXECUTE_PROCESS, Permission.WRITE_LAYER}),
    Role.ADMIN: frozenset(Permission),
}

# Labels for layers the store has never heard of. Unknown means most restrictive.
UNLABELED_DEFAULT = SensitivityLabel.CONFIDENTIAL

ALLOW = "allow"
DENY = "deny"


# -- credentials ---------------------------------------------------------------

@dataclass(frozen=True)
class Credential:
    salt: str
    iterations: int
    digest: str

    @classmethod
    def create(cls, secret: str, iterations: int = 10_000, salt: Optional[bytes] = None) -> "Credential":
        salt = os.urandom(16) if salt is None else salt
        digest = hashlib.pbkdf2_hmac("sha256", secret.encode(), salt, iterations)
        return cls(salt.hex(), iterations, digest.hex())

    def check(self, secret: str) -> bool:
        digest = hashlib.pbkdf2_hmac("sha256", secret.encode(), bytes.fromhex(self.salt), self.iterations)
        return hmac.compare_digest(digest.hex(), self.digest)

    def to_dict(self) -> dict:
        return {"salt": self.salt, "iterations": self.iterations, "hash": self.digest}

    @classmethod
    def from_dict(cls, d: dict) -> "Credential":
        return cls(d["salt"], int(d["iterations"]), d["hash"])


@dataclass
class Principal:
    principal_id: str
    display_name: str
    credential: Credential
    roles: set = field(default_factory=set)


@dataclass(frozen=True)
class AclEntry:
    principal_id: str
    permission: Permission
    effect: str  # ALLOW | DENY

    def to_dict(self, layer_id: str) -> dict:
        return {"layer_id": layer_id, "principal_id": self.principal_id,
                "permission": self.permission.value, "effect": self.effect}


@dataclass(frozen=True)
class AuditRecord:
    timestamp: float
    principal_id: Optional[str]
    operation: str
    layer_id: Optional[str]
    decision: str
    reason: str

    def to_json(self) -> str:
        return json.dumps({
            "timestamp": self.timestamp, "principal_id": self.principal_id,
            "operation": self.operation, "layer_id": self.layer_id,
            "decision": self.decision, "reason": self.reason,
        }, sort_keys=True)


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str
    principal_id: Optional[str] = None

    def __bool__(self):
        return self.allowed


@dataclass(frozen=True)
class Session:
    principal_id: str
    expires_at: float


class PolicyStore:
    """Principals, role grants, ACLs, labels, sessions and the audit trail.

    Writes are serialized through one lock. ``authorize`` only takes the lock
    to append its audit record.

    ``clock`` and ``rng`` are injectable so the simulator can run the store
    on virtual time with reproducible tokens.
    """

    def __init__(
        self,
        role_permissions: Optional[dict] = None,
        *,
        token_ttl: float = 3600.0,
        lockout_threshold: int = 5,
        iterations: int = 10_000,
        clock: Callable[[], float] = time.time,
        rng: Optional[random.Random] = None,
        audit_path: Optional[str] = None,
    ):
        if role_permissions is None:
            role_permissions = DEFAULT_ROLE_PERMISSIONS
        self.role_permissions: dict[Role, frozenset[Permission]] = {
            Role(r): frozenset(Permission(p) for p in perms) for r, perms in role_permissions.items()
        }
        self.principals: dict[str, Principal] = {}
        self.acls: dict[str, list[AclEntry]] = {}
        self.clearances: dict[str, SensitivityLabel] = {}
        self.layer_labels: dict[str, SensitivityLabel] = {}
        self.sessions: dict[str, Session] = {}
        self.audit: list[AuditRecord] = []
        self.token_ttl = token_ttl
        self.lockout_threshold = lockout_threshold
        self.iterations = iterations
        self.clock = clock
        self.rng = rng
        self.audit_path = audit_path
        self._failures: dict[str, int] = {}
        self._lock = threading.RLock()
        self._dummy: Optional[Credential] = None

    # -- bootstrap helpers (no authorization, used when loading or seeding) --

    def add_principal(self, principal_id, secret, roles, display_name=None, clearance=None,
                      credential: Optional[Credential] = None) -> Principal:
        roles = {Role(r) for r in roles}
        if not roles:
            raise InvalidChange(f"principal {principal_id} needs at least one role")
        with self._lock:
            if principal_id in self.principals:
                raise InvalidChange(f"principal already exists: {principal_id}")
            if credential is None:
                credential = Credential.create(secret, self.iterations)
            p = Principal(principal_id, display_name or principal_id, credential, roles)
            self.principals[principal_id] = p
            if clearance is not None:
                self.clearances[principal_id] = SensitivityLabel.parse(clearance)
            return p

    def set_layer_label(self, layer_id: str, label) -> None:
        with self._lock:
            self.layer_labels[layer_id] = SensitivityLabel.parse(label)

    def clearance(self, principal_id: str) -> SensitivityLabel:
        return self.clearances.get(principal_id, SensitivityLabel.PUBLIC)

    def label(self, layer_id: str) -> SensitivityLabel:
        return self.layer_labels.get(layer_id, UNLABELED_DEFAULT)

    def session(self, token: Optional[str]) -> Optional[Session]:
        """The live session for ``token``, or None if unknown or expired."""
        if not token:
            return None
        s = self.sessions.get(token)
        if s is None or self.clock() >= s.expires_at:
            return None
        return s

    def new_token(self) -> str:
        if self.rng is not None:
            return f"{self.rng.getrandbits(128):032x}"
        return secrets.token_hex(16)

    def open_session(self, principal_id: str) -> str:
        with self._lock:
            token = self.new_token()
            self.sessions[token] = Session(principal_id, self.clock() + self.token_ttl)
            return token

    def record(self, principal_id, operation, layer_id, decision, reason) -> AuditRecord:
        with self._lock:
            rec = AuditRecord(self.clock(), principal_id, operation, layer_id, decision, reason)
            self.audit.append(rec)
            if self.audit_path:
                with open(self.audit_path, "a", encoding="utf-8") as fh:
                    fh.write(rec.to_json() + "\n")
            return rec

    def admin_count(self) -> int:
        return sum(1 for p in self.principals.values() if Role.ADMIN in p.roles)

    # -- persistence --

    def to_dict(self) -> dict:
        return {
            "principals": [
                {"principal_id": p.principal_id, "display_name": p.display_name,
                 "roles": sorted(r.value for r in p.roles), "credential": p.credential.to_dict()}
                for p in sorted(self.principals.values(), key=lambda p: p.principal_id)
            ],
            "role_permissions": {
                r.value: sorted(p.value for p in perms)
                for r, perms in sorted(self.role_permissions.items(), key=lambda kv: kv[0].value)
            },
            "acls": [e.to_dict(layer) for layer in sorted(self.acls) for e in self.acls[layer]],
            "clearances": {pid: lab.label for pid, lab in sorted(self.clearances.items())},
            "layer_labels": {lid: lab.label for lid, lab in sorted(self.layer_labels.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict, **kwargs) -> "PolicyStore":
        store = cls(doc.get("role_permissions"), **kwargs)
        for p in doc.get("principals", []):
            cred = Credential.from_dict(p["credential"]) if "credential" in p else None
            store.add_principal(p["principal_id"], p.get("secret", ""), p["roles"],
                                p.get("display_name"), credential=cred)
        for e in doc.get("acls", []):
            store.acls.setdefault(e["layer_id"], []).append(
                AclEntry(e["principal_id"], Permission(e["permission"]), _effect(e["effect"])))
        for pid, lab in doc.get("clearances", {}).items():
            store.clearances[pid] = SensitivityLabel.parse(lab)
        for lid, lab in doc.get("layer_labels", {}).items():
            store.layer_labels[lid] = SensitivityLabel.parse(lab)
        return store

    @classmethod
    def load(cls, path, **kwargs) -> "PolicyStore":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), **kwargs)

    def save(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def _effect(value: str) -> str:
    if value not in (ALLOW, DENY):
        raise InvalidChange(f"ACL effect must be allow or deny, got {value!r}")
    return value


# -- authentication / authorization ---------------------------------------------

def authenticate(store: PolicyStore, principal_id: str, secret: str) -> str:
    """Check a secret and open a session. Returns a 32-hex-char token.

    Unknown principals and wrong secrets raise the same ``BadCredentials``.
    """
    with store._lock:
        if store._failures.get(principal_id, 0) >= store.lockout_threshold:
            store.record(principal_id, "authenticate", None, DENY, "locked_out")
            raise LockedOut(f"{principal_id} is locked out")
        p = store.principals.get(principal_id)
        if p is not None:
            ok = p.credential.check(secret)
        else:
            # same hashing cost as a real check so timing does not reveal unknown ids
            if store._dummy is None:
                store._dummy = Credential.create("", store.iterations, salt=b"\0" * 16)
            store._dummy.check(secret)
            ok = False
        if not ok:
            store._failures[principal_id] = store._failures.get(principal_id, 0) + 1
            store.record(principal_id, "authenticate", None, DENY, "bad_credentials")
            raise BadCredentials()
        store._failures.pop(principal_id, None)
        token = store.open_session(principal_id)
        store.record(principal_id, "authenticate", None, ALLOW, "ok")
        return token


def evaluate(store: PolicyStore, token: Optional[str], layer_id: Optional[str], perm) -> Decision:
    """Gate evaluation without auditing."""
    perm = Permission(perm)
    s = store.session(token)
    if s is None:
        return Decision(False, "expired_token")
    pid = s.principal_id
    p = store.principals.get(pid)
    if p is None or not any(perm in store.role_permissions.get(r, ()) for r in p.roles):
        return Decision(False, "rbac", pid)
    if layer_id is not None:
        if store.clearance(pid) < store.label(layer_id):
            return Decision(False, "mac", pid)
        entries = [e for e in store.acls.get(layer_id, ()) if e.permission == perm]
        if any(e.effect == DENY and e.principal_id == pid for e in entries):
            return Decision(False, "dac", pid)
        allows = [e for e in entries if e.effect == ALLOW]
        if allows and not any(e.principal_id == pid for e in allows):
            return Decision(False, "dac", pid)
    return Decision(True, "ok", pid)


def authorize(store: PolicyStore, token: Optional[str], layer_id: Optional[str], perm) -> Decision:
    """Evaluate all gates for ``perm`` (on ``layer_id`` if given) and audit the result."""
    d = evaluate(store, token, layer_id, perm)
    store.record(d.principal_id, Permission(perm).value, layer_id, ALLOW if d else DENY, d.reason)
    return d


# -- administration --------------------------------------------------------------

CHANGE_KINDS = ("add_principal", "grant_role", "revoke_role", "set_label",
                "set_clearance", "set_acl", "unlock")


@dataclass(frozen=True)
class PolicyChange:
    kind: str
    principal_id: Optional[str] = None
    role: Optional[str] = None
    roles: tuple = ()
    secret: Optional[str] = None
    display_name: Optional[str] = None
    layer_id: Optional[str] = None
    label: Optional[str] = None
    entries: tuple = ()

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyChange":
        if not isinstance(d, dict) or d.get("kind") not in CHANGE_KINDS:
            raise InvalidChange(f"unknown change kind: {d.get('kind') if isinstance(d, dict) else d!r}")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidChange(f"unexpected fields: {', '.join(sorted(extra))}")
        d = dict(d)
        d["roles"] = tuple(d.get("roles", ()))
        d["entries"] = tuple(tuple(sorted(e.items())) for e in d.get("entries", ()))
        return cls(**d)


def _require(value, name, kind):
    if value is None:
        raise InvalidChange(f"{kind} requires {name}")
    return value


def _parse_role(value) -> Role:
    try:
        return Role(value)
    except ValueError:
        raise InvalidChange(f"unknown role: {value!r}") from None


def _parse_label(value) -> SensitivityLabel:
    try:
        return SensitivityLabel.parse(value)
    except ValueError as exc:
        raise InvalidChange(str(exc)) from None


def apply_change(store: PolicyStore, change: PolicyChange) -> None:
    """Validate then apply one change. Either all of it lands or none of it."""
    k = change.kind
    with store._lock:
        if k == "add_principal":
            pid = _require(change.principal_id, "principal_id", k)
            roles = [_parse_role(r) for r in change.roles or ((change.role,) if change.role else ())]
            clearance = _parse_label(change.label) if change.label is not None else None
            store.add_principal(pid, _require(change.secret, "secret", k), roles,
                                change.display_name, clearance)
            return
        if k == "set_label":
            store.layer_labels[_require(change.layer_id, "layer_id", k)] = _parse_label(
                _require(change.label, "label", k))
            return
        if k == "set_acl":
            layer = _require(change.layer_id, "layer_id", k)
            entries = []
            for raw in change.entries:
                e = dict(raw)
                try:
                    entries.append(AclEntry(e["principal_id"], Permission(e["permission"]), _effect(e["effect"])))
                except (KeyError, ValueError) as exc:
                    raise InvalidChange(f"bad ACL entry {e}: {exc}") from None
            if entries:
                store.acls[layer] = entries
            else:
                store.acls.pop(layer, None)
            return
        pid = _require(change.principal_id, "principal_id", k)
        p = store.principals.get(pid)
        if p is None:
            raise InvalidChange(f"unknown principal: {pid}")
        if k == "grant_role":
            p.roles.add(_parse_role(_require(change.role, "role", k)))
        elif k == "revoke_role":
            role = _parse_role(_require(change.role, "role", k))
            if role not in p.roles:
                raise InvalidChange(f"{pid} does not hold {role.value}")
            if len(p.roles) == 1:
                raise InvalidChange(f"{pid} would be left with no role")
            if role is Role.ADMIN and store.admin_count() == 1:
                raise InvalidChange("cannot revoke the last admin role")
            p.roles.discard(role)
        elif k == "set_clearance":
            store.clearances[pid] = _parse_label(_require(change.label, "label", k))
        elif k == "unlock":
            store._failures.pop(pid, None)


def manage_policy(store: PolicyStore, admin_token: Optional[str], change) -> PolicyStore:
    if isinstance(change, dict):
        change = PolicyChange.from_dict(change)
    d = authorize(store, admin_token, None, Permission.MANAGE_POLICY)
    if not d:
        raise Unauthorized(f"manage_policy denied: {d.reason}")
    op = f"manage_policy:{change.kind}"
    try:
        apply_change(store, change)
    except InvalidChange as exc:
        store.record(d.principal_id, op, change.layer_id, DENY, "invalid_change")
        raise exc
    store.record(d.principal_id, op, change.layer_id, ALLOW, "ok")
    return store


# -- integrity envelopes -------------------------------------------------------------

KEY_LENGTH = 32


@dataclass(frozen=True)
class Envelope:
    payload: bytes
    key_id: str
    mac: str


def hmac_sha256(key: bytes, payload: bytes) -> str:
    return hmac.new(key, payload, hashlib.sha256).hexdigest()


def seal_envelope(payload: bytes, key_id: str, key: bytes, *, check_key_length: bool = True) -> Envelope:
    """MAC ``payload`` with HMAC-SHA-256 under ``key``.

    Deployment keys must be exactly 32 bytes; ``check_key_length=False``
    admits the odd-sized keys of published test vectors.
    """
    if check_key_length and len(key) != KEY_LENGTH:
        raise BadKeyLength(f"key must be {KEY_LENGTH} bytes, got {len(key)}")
    return Envelope(bytes(payload), key_id, hmac_sha256(key, payload))


def verify_envelope(env: Envelope, key: bytes) -> bool:
    expected = hmac_sha256(key, env.payload)
    mac = env.mac if isinstance(env.mac, str) else ""
    # compare_digest requires ASCII str; anything else cannot match anyway
    if not mac.isascii():
        return False
    return hmac.compare_digest(expected, mac)


def default_role_matrix() -> dict[str, list[str]]:
    return {r.value: sorted(p.value for p in perms) for r, perms in DEFAULT_ROLE_PERMISSIONS.items()}


def roles_of(names: Iterable[str]) -> set[Role]:
    return {Role(n) for n in names}
