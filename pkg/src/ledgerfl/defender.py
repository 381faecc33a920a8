"""The Defender contract: sole holder of the secret key.

It answers BT2C decryption requests under guarded rules, filters poisoned
models with the G-KDE defense and computes both rewards.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import he
from .density import kde_groups
from .he import HEParams
from .ledger import AppraisalTx, Ledger, MembershipService, PrivacyTx, SecurityTx
from .oracles import DEFENDER, Capability, KeyOracle, KeyRecord

log = logging.getLogger(__name__)

VARIATION_TOLERANCE = 0.05
CONTRACT_SHARE = 0.1


class ProtocolError(RuntimeError):
    """A BT2C request could not be served."""


@dataclass(frozen=True, eq=False)
class EvaluationKeys:
    """What the Defender publishes: everything except the secret key."""

    public_key: he.PublicKey
    relin_key: he.SwitchingKey
    galois_keys: he.GaloisKeys

    @property
    def params(self) -> HEParams:
        return self.public_key.params

    @property
    def ref(self) -> str:
        return "sha256:" + hashlib.sha256(self.public_key.to_bytes()).hexdigest()


@dataclass(frozen=True)
class DecryptionResult:
    kind: str
    sum_value: float | None = None
    model_chunk: np.ndarray | None = None

    def payload(self):
        if self.kind == "sum":
            return self.sum_value
        if self.kind == "model":
            return [float(x) for x in self.model_chunk]
        return None

    @classmethod
    def from_wire(cls, item: dict) -> "DecryptionResult":
        kind = item["kind"]
        if kind == "sum":
            return cls(kind, sum_value=float(item["payload"]))
        if kind == "model":
            return cls(kind, model_chunk=np.asarray(item["payload"], dtype=float))
        if kind == "empty":
            return cls(kind)
        raise ProtocolError(f"unknown result kind {kind!r}")


def variation(rho, noise_floor: float = 0.0) -> float:
    """|(max - min) / max| with guards for flat and near-zero arrays.

    A spread at or below `noise_floor` counts as flat: sums that are
    mathematically zero decrypt to pure noise and must still read as sums.
    """
    rho = np.asarray(rho, dtype=float)
    hi, lo = float(rho.max()), float(rho.min())
    spread = hi - lo
    if spread <= noise_floor:
        return 0.0
    denom = hi if abs(hi) >= 1e-12 else max(abs(hi), abs(lo), 1e-12)
    return abs(spread / denom)


def contract_reward(session_reward: float, anomalies: int, sessions: int) -> float:
    """0.1 * R * exp(-(phi + 1) / s): the penalised contract reward."""
    if sessions < 1:
        raise ValueError("at least one session must exist")
    return CONTRACT_SHARE * session_reward * math.exp(-(anomalies + 1) / sessions)


def session_params(ledger: Ledger, session_id: str) -> HEParams:
    ctx = ledger.session(session_id).encryption_context
    return HEParams(ctx["poly_degree"], tuple(ctx["modulus_chain"]), ctx["scale"],
                    ctx.get("noise_stddev", 3.2))


class Defender:
    def __init__(self, ledger: Ledger, membership: MembershipService | None = None,
                 key_oracle_root: str | None = None, *,
                 variation_tol: float = VARIATION_TOLERANCE, noise_floor: float = 1e-3):
        self.ledger = ledger
        self.membership = membership
        self.variation_tol = variation_tol
        self.noise_floor = noise_floor
        self._cap = Capability.issue(DEFENDER)
        if key_oracle_root is None:
            self._keys = KeyOracle(self._cap)
        else:
            self._keys = KeyOracle.on_disk(self._cap, key_oracle_root)
        self._session_locks: dict[str, threading.Lock] = {}
        self._offsets: dict[str, float] = {}

    # -- keys

    def provision_keys(self, session_id: str, params: HEParams, seed: int) -> EvaluationKeys:
        """Generate a key set, keep the secret in Oracle B, publish the rest."""
        km = he.keygen(params, seed)
        self._keys.store_key(KeyRecord(session_id, km.secret_key.to_bytes()), self._cap)
        return EvaluationKeys(km.public_key, km.relin_key, km.galois_keys)

    def _secret(self, session_id: str, params: HEParams) -> he.SecretKey:
        try:
            rec = self._keys.load_key(session_id, self._cap)
        except KeyError:
            raise ProtocolError(f"no secret key stored for session {session_id}") from None
        return he.SecretKey.from_bytes(rec.secret_key, params)

    def _lock(self, session_id: str) -> threading.Lock:
        return self._session_locks.setdefault(session_id, threading.Lock())

    # -- secure decryption

    def implicated_models(self, session_id: str) -> list[str]:
        """Models whose offsets the model branch removes.

        The latest round's TT5 benign list when grouping has happened,
        otherwise every TT2 of that round.
        """
        stored = self.ledger.query("TT2", session_id)
        if not stored:
            return []
        rnd = max(tx.round for tx in stored)
        grouping = self.ledger.latest("TT5", session_id, rnd)
        if grouping is not None:
            return list(grouping.benign_ids)
        return [tx.model_id for tx in stored if tx.round == rnd]

    def _offset(self, model_id: str, sk: he.SecretKey, params: HEParams) -> float:
        if model_id not in self._offsets:
            cipher = he.Ciphertext.from_base64(self.ledger.model(model_id).offset_cipher, params)
            self._offsets[model_id] = float(np.mean(he.decrypt(cipher, sk, params)))
        return self._offsets[model_id]

    def secure_decryption(self, ciphers, session_id: str) -> list[DecryptionResult]:
        """Decrypt each cipher and release only what its shape allows.

        Flat arrays are sums and yield their average. Varied arrays are model
        chunks: released offset-free and averaged only when at least two
        models are implicated. Otherwise a privacy anomaly is recorded.
        """
        session = self.ledger.session(session_id)
        params = session_params(self.ledger, session_id)
        with self._lock(session_id):
            sk = self._secret(session_id, params)
            implicated = None
            out = []
            for z in ciphers:
                try:
                    rho = he.decrypt(z, sk, params)
                except he.HEError as exc:
                    raise ProtocolError(f"unreadable cipher: {exc}") from exc
                if variation(rho, self.noise_floor) <= self.variation_tol:
                    out.append(DecryptionResult("sum", sum_value=float(np.mean(rho))))
                    continue
                if implicated is None:
                    implicated = self.implicated_models(session_id)
                k = len(implicated)
                if k > 1:
                    total = sum(self._offset(m, sk, params) for m in implicated)
                    out.append(DecryptionResult("model", model_chunk=(rho - total) / k))
                else:
                    r_c = contract_reward(session.session_reward, self.ledger.count("TT4"),
                                          self.ledger.count("TT1"))
                    self.ledger.append(PrivacyTx(session_id, r_c))
                    log.warning("privacy anomaly in %s: K=%d, R_C -> %.6g", session_id, k, r_c)
                    out.append(DecryptionResult("empty"))
            return out

    def handle(self, request: str) -> str:
        """BT2C endpoint: JSON request in, JSON response out."""
        msg = json.loads(request)
        params = session_params(self.ledger, msg["session_id"])
        ciphers = [he.Ciphertext.from_base64(c, params) for c in msg["ciphers"]]
        results = self.secure_decryption(ciphers, msg["session_id"])
        return json.dumps({
            "batch_id": msg["batch_id"],
            "results": [{"handle": i, "kind": r.kind, "payload": r.payload()}
                        for i, r in enumerate(results)],
        })

    # -- defense and rewards

    def poisoning_defense(self, session_id: str, round: int) -> tuple[list[str], list[str]]:
        """Group the round's distance scores; the lowest-distance group is benign."""
        self.ledger.session(session_id)
        latest: dict[str, float] = {}
        for tx in self.ledger.query("TT3", session_id, round):
            latest[tx.model_id] = tx.score
        ids = list(latest)
        if not ids:
            benign, malicious = [], []
        else:
            groups = kde_groups(np.array([latest[m] for m in ids]))
            first = set(groups[0].tolist())
            benign = [m for i, m in enumerate(ids) if i in first]
            malicious = [m for i, m in enumerate(ids) if i not in first]
        self.ledger.append(SecurityTx(session_id, round, benign, malicious))
        return benign, malicious

    def accept_all(self, session_id: str, round: int) -> tuple[list[str], list[str]]:
        """Undefended baseline: every stored model of the round is grouped benign."""
        benign = [tx.model_id for tx in self.ledger.query("TT2", session_id, round)]
        self.ledger.append(SecurityTx(session_id, round, benign, []))
        return benign, []

    def contract_reward_query(self, session_id: str) -> float:
        session = self.ledger.session(session_id)
        latest = self.ledger.latest("TT4", session_id)
        if latest is None:
            return CONTRACT_SHARE * session.session_reward
        return latest.contract_reward

    def training_reward(self, session_id: str, round: int) -> float:
        """(R - R_C) / (T * |g_1|), paid to each benign client; malicious get 0."""
        session = self.ledger.session(session_id)
        grouping = self.ledger.latest("TT5", session_id, round)
        if grouping is None:
            raise ProtocolError(f"round {round} has not been grouped")
        benign = grouping.benign_ids
        if not benign:
            log.warning("empty benign group in %s round %d: nobody is paid", session_id, round)
            return 0.0
        r_c = self.contract_reward_query(session_id)
        r_tau = (session.session_reward - r_c) / (session.total_rounds * len(benign))
        self.ledger.append(AppraisalTx(session_id, round, r_tau))
        if self.membership is not None:
            for m in benign:
                self.membership.credit(self.ledger.model(m).client_id, r_tau)
        return r_tau
