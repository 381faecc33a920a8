"""Role-separated storage for encrypted models (Oracle A) and secret keys (Oracle B).

Each contract carries a capability token naming its role. An oracle only
answers callers whose token matches the role it was created for.
"""
from __future__ import annotations

import json
import os
import re
import secrets
import threading
from dataclasses import asdict, dataclass

GATEWAY = "gateway"
DEFENDER = "defender"

_SAFE_ID = re.compile(r"^[A-Za-z0-9_.\-]+$")


class AccessError(PermissionError):
    """The caller's capability does not grant access to this oracle."""


class OracleError(KeyError):
    pass


@dataclass(frozen=True)
class Capability:
    role: str
    token: str

    @classmethod
    def issue(cls, role: str) -> "Capability":
        if role not in (GATEWAY, DEFENDER):
            raise ValueError(f"unknown role {role!r}")
        return cls(role, secrets.token_hex(16))


@dataclass(frozen=True)
class ModelDocument:
    model_id: str
    client_id: str
    cipher_texts: list
    offset_cipher: str


@dataclass(frozen=True)
class KeyRecord:
    session_id: str
    secret_key: bytes


class _Backend:
    def put(self, key: str, value: bytes) -> None:
        raise NotImplementedError

    def get(self, key: str) -> bytes:
        raise NotImplementedError


class MemoryBackend(_Backend):
    def __init__(self):
        self._data: dict[str, bytes] = {}

    def put(self, key, value):
        self._data[key] = bytes(value)

    def get(self, key):
        try:
            return self._data[key]
        except KeyError:
            raise OracleError(key) from None


class DirectoryBackend(_Backend):
    """One file per record inside `root`; `suffix` is appended to the key."""

    def __init__(self, root: str, suffix: str = ""):
        self.root = root
        self.suffix = suffix
        os.makedirs(root, exist_ok=True)

    def _path(self, key: str) -> str:
        if not _SAFE_ID.match(key):
            raise OracleError(f"invalid record id {key!r}")
        return os.path.join(self.root, key + self.suffix)

    def put(self, key, value):
        path = self._path(key)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(value)
        os.replace(tmp, path)

    def get(self, key):
        try:
            with open(self._path(key), "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            raise OracleError(key) from None


class _Oracle:
    role = ""

    def __init__(self, capability: Capability, backend: _Backend | None = None):
        if capability.role != self.role:
            raise AccessError(f"{capability.role} cannot own the {self.role} oracle")
        self._owner = capability
        self._backend = backend or MemoryBackend()
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _authorize(self, capability: Capability) -> None:
        if capability != self._owner:
            raise AccessError(f"{capability.role} capability rejected by {self.role} oracle")

    def _lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())


class ModelOracle(_Oracle):
    """Oracle A: encrypted model documents, readable by the Gateway only."""

    role = GATEWAY

    @classmethod
    def on_disk(cls, capability: Capability, root: str) -> "ModelOracle":
        return cls(capability, DirectoryBackend(root, ".json"))

    def store_model(self, doc: ModelDocument, capability: Capability) -> str:
        self._authorize(capability)
        if not isinstance(doc.cipher_texts, list) or not all(isinstance(t, str) for t in doc.cipher_texts):
            raise ValueError("cipher_texts must be a list of base64 strings")
        body = json.dumps(asdict(doc), sort_keys=True).encode()
        with self._lock(doc.model_id):
            self._backend.put(doc.model_id, body)
        return doc.model_id

    def load_model(self, model_id: str, capability: Capability) -> ModelDocument:
        self._authorize(capability)
        return ModelDocument(**json.loads(self._backend.get(model_id)))


class KeyOracle(_Oracle):
    """Oracle B: secret keys per session, readable by the Defender only."""

    role = DEFENDER

    @classmethod
    def on_disk(cls, capability: Capability, root: str) -> "KeyOracle":
        return cls(capability, DirectoryBackend(root, ".key"))

    def store_key(self, rec: KeyRecord, capability: Capability) -> None:
        self._authorize(capability)
        with self._lock(rec.session_id):
            self._backend.put(rec.session_id, rec.secret_key)

    def load_key(self, session_id: str, capability: Capability) -> KeyRecord:
        self._authorize(capability)
        return KeyRecord(session_id, self._backend.get(session_id))
