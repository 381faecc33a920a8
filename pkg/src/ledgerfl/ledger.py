"""Append-only transaction log and membership service.

Consensus is assumed honest, so the ledger is a single-writer hash chain with
one transaction per block. The seven transaction types mirror the protocol
records: session init (TT1) through global model (TT7).
"""
from __future__ import annotations

import hashlib
import io
import json
import threading
from dataclasses import asdict, dataclass, field, fields
from typing import ClassVar, Iterable, TextIO

GENESIS_HASH = "0" * 64


class LedgerError(ValueError):
    """A transaction violates a referential or value invariant."""


@dataclass(frozen=True)
class Transaction:
    TYPE: ClassVar[str] = ""

    def to_dict(self) -> dict:
        return {"type": self.TYPE, **asdict(self)}

    def canonical(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class InitTx(Transaction):
    TYPE: ClassVar[str] = "TT1"
    session_id: str
    owner_id: str
    public_key_ref: str
    encryption_context: dict
    total_rounds: int
    session_reward: float


@dataclass(frozen=True)
class StorageTx(Transaction):
    TYPE: ClassVar[str] = "TT2"
    session_id: str
    round: int
    client_id: str
    model_id: str
    offset_cipher: str


@dataclass(frozen=True)
class AnalysisTx(Transaction):
    TYPE: ClassVar[str] = "TT3"
    session_id: str
    round: int
    model_id: str
    score: float


@dataclass(frozen=True)
class PrivacyTx(Transaction):
    TYPE: ClassVar[str] = "TT4"
    session_id: str
    contract_reward: float


@dataclass(frozen=True)
class SecurityTx(Transaction):
    TYPE: ClassVar[str] = "TT5"
    session_id: str
    round: int
    benign_ids: list
    malicious_ids: list


@dataclass(frozen=True)
class AppraisalTx(Transaction):
    TYPE: ClassVar[str] = "TT6"
    session_id: str
    round: int
    training_reward: float


@dataclass(frozen=True)
class GlobalTx(Transaction):
    TYPE: ClassVar[str] = "TT7"
    session_id: str
    round: int
    global_id: str
    global_weights: list
    encrypted_global: list


TX_TYPES: dict[str, type[Transaction]] = {
    cls.TYPE: cls
    for cls in (InitTx, StorageTx, AnalysisTx, PrivacyTx, SecurityTx, AppraisalTx, GlobalTx)
}


def transaction_from_dict(data: dict) -> Transaction:
    data = dict(data)
    kind = data.pop("type", None)
    cls = TX_TYPES.get(kind)
    if cls is None:
        raise LedgerError(f"unknown transaction type {kind!r}")
    names = {f.name for f in fields(cls)}
    if set(data) != names:
        raise LedgerError(f"{kind} fields {sorted(data)} do not match {sorted(names)}")
    return cls(**data)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: str
    tx_list: tuple[Transaction, ...]
    hash: str

    @staticmethod
    def digest(prev_hash: str, tx_list: Iterable[Transaction]) -> str:
        h = hashlib.sha256(prev_hash.encode())
        for tx in tx_list:
            body = tx.canonical()
            h.update(len(body).to_bytes(8, "little"))
            h.update(body)
        return h.hexdigest()


@dataclass(frozen=True)
class BlockRef:
    height: int
    hash: str


class Ledger:
    """Hash-chained, append-only store of protocol transactions."""

    def __init__(self):
        self._blocks: list[Block] = []
        self._txs: list[Transaction] = []
        self._lock = threading.Lock()
        self._sessions: dict[str, InitTx] = {}
        self._models: dict[str, StorageTx] = {}
        self._round_models: dict[tuple[str, int], list[str]] = {}
        self._scored: set[tuple[str, int, str]] = set()
        self._grouped: set[tuple[str, int]] = set()

    # -- writes

    def append(self, tx: Transaction) -> BlockRef:
        with self._lock:
            self._validate(tx)
            prev = self._blocks[-1].hash if self._blocks else GENESIS_HASH
            block = Block(len(self._blocks), prev, (tx,), Block.digest(prev, (tx,)))
            self._blocks.append(block)
            self._txs.append(tx)
            self._index(tx)
            return BlockRef(block.height, block.hash)

    def _validate(self, tx: Transaction) -> None:
        if isinstance(tx, InitTx):
            if tx.session_id in self._sessions:
                raise LedgerError(f"session {tx.session_id} already initialised")
            if tx.total_rounds < 1 or tx.session_reward < 0:
                raise LedgerError("TT1 needs total_rounds >= 1 and a non-negative reward")
            return
        if tx.session_id not in self._sessions:
            raise LedgerError(f"{tx.TYPE} references unknown session {tx.session_id}")
        if isinstance(tx, StorageTx):
            if tx.model_id in self._models:
                raise LedgerError(f"model {tx.model_id} already stored")
        elif isinstance(tx, AnalysisTx):
            stored = self._models.get(tx.model_id)
            if stored is None or stored.session_id != tx.session_id:
                raise LedgerError(f"TT3 references unknown model {tx.model_id}")
            if (tx.session_id, tx.round, tx.model_id) in self._scored:
                raise LedgerError(f"duplicate score for {tx.model_id} in round {tx.round}")
        elif isinstance(tx, PrivacyTx):
            if tx.contract_reward < 0:
                raise LedgerError("contract reward must be non-negative")
        elif isinstance(tx, SecurityTx):
            benign, malicious = set(tx.benign_ids), set(tx.malicious_ids)
            if benign & malicious:
                raise LedgerError("benign and malicious groups overlap")
            expected = set(self._round_models.get((tx.session_id, tx.round), []))
            if benign | malicious != expected:
                raise LedgerError("TT5 groups do not cover the round's stored models")
            if (tx.session_id, tx.round) in self._grouped:
                raise LedgerError(f"round {tx.round} already grouped")
        elif isinstance(tx, AppraisalTx):
            if tx.training_reward < 0:
                raise LedgerError("training reward must be non-negative")

    def _index(self, tx: Transaction) -> None:
        if isinstance(tx, InitTx):
            self._sessions[tx.session_id] = tx
        elif isinstance(tx, StorageTx):
            self._models[tx.model_id] = tx
            self._round_models.setdefault((tx.session_id, tx.round), []).append(tx.model_id)
        elif isinstance(tx, AnalysisTx):
            self._scored.add((tx.session_id, tx.round, tx.model_id))
        elif isinstance(tx, SecurityTx):
            self._grouped.add((tx.session_id, tx.round))

    # -- reads

    def query(self, type: str | None = None, session_id: str | None = None,
              round: int | None = None) -> list[Transaction]:
        """Matching transactions in append order."""
        with self._lock:
            txs = list(self._txs)
        out = []
        for tx in txs:
            if type is not None and tx.TYPE != type:
                continue
            if session_id is not None and tx.session_id != session_id:
                continue
            if round is not None and getattr(tx, "round", None) != round:
                continue
            out.append(tx)
        return out

    def count(self, type: str) -> int:
        with self._lock:
            return sum(1 for tx in self._txs if tx.TYPE == type)

    def session(self, session_id: str) -> InitTx:
        try:
            return self._sessions[session_id]
        except KeyError:
            raise LedgerError(f"unknown session {session_id}") from None

    def model(self, model_id: str) -> StorageTx:
        try:
            return self._models[model_id]
        except KeyError:
            raise LedgerError(f"unknown model {model_id}") from None

    def latest(self, type: str, session_id: str | None = None, round: int | None = None):
        found = self.query(type, session_id, round)
        return found[-1] if found else None

    @property
    def blocks(self) -> list[Block]:
        return list(self._blocks)

    def __len__(self) -> int:
        return len(self._txs)

    def verify_chain(self) -> bool:
        prev = GENESIS_HASH
        for height, block in enumerate(self._blocks):
            if block.height != height or block.prev_hash != prev:
                return False
            if Block.digest(prev, block.tx_list) != block.hash:
                return False
            prev = block.hash
        return True

    # -- line-delimited JSON

    def export_jsonl(self, out: TextIO | str | None = None) -> str:
        text = "".join(json.dumps(tx.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
                       for tx in self.query())
        if isinstance(out, str):
            with open(out, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        elif out is not None:
            out.write(text)
        return text

    @classmethod
    def import_jsonl(cls, source: TextIO | str) -> "Ledger":
        """Rebuild a ledger by re-appending every exported transaction."""
        if isinstance(source, str):
            source = io.StringIO(source) if "\n" in source or source.startswith("{") \
                else open(source, encoding="utf-8")
        ledger = cls()
        with source:
            for line in source:
                if line.strip():
                    ledger.append(transaction_from_dict(json.loads(line)))
        return ledger


# ---------------------------------------------------------------- membership

@dataclass
class Identity:
    client_id: str
    wallet: str
    balance: float = 0.0


class MembershipError(ValueError):
    pass


@dataclass
class MembershipService:
    """Issues unique client identities and tracks token balances."""

    identities: dict[str, Identity] = field(default_factory=dict)
    _by_wallet: dict[str, str] = field(default_factory=dict)

    def register_client(self, wallet: str) -> Identity:
        if wallet in self._by_wallet:
            raise MembershipError(f"wallet {wallet} is already registered")
        client_id = "client-" + hashlib.sha256(wallet.encode()).hexdigest()[:16]
        ident = Identity(client_id, wallet)
        self.identities[client_id] = ident
        self._by_wallet[wallet] = client_id
        return ident

    def get(self, client_id: str) -> Identity:
        try:
            return self.identities[client_id]
        except KeyError:
            raise MembershipError(f"unknown client {client_id}") from None

    def credit(self, client_id: str, amount: float) -> None:
        if amount < 0:
            raise MembershipError("credits must be non-negative")
        self.get(client_id).balance += amount
