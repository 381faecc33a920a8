"""The Gateway contract: stores encrypted models and computes on ciphertexts.

It never holds a secret key. Every value it needs in the clear comes back
from the Defender through shuffled BT2C batches.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import he
from .clients import EncryptedModel
from .defender import DecryptionResult, EvaluationKeys, ProtocolError
from .he import HEParams
from .ledger import GlobalTx, InitTx, Ledger, LedgerError, AnalysisTx, StorageTx
from .oracles import GATEWAY, Capability, ModelDocument, ModelOracle

log = logging.getLogger(__name__)

MAGNITUDE_GUARD = 1e-12


@dataclass(frozen=True)
class ShuffledBatch:
    """A permuted cipher batch. `permutation[k]` is the original index at position k."""

    batch_id: str
    ciphers: list
    permutation: np.ndarray

    @classmethod
    def build(cls, batch_id: str, ciphers, rng: np.random.Generator) -> "ShuffledBatch":
        perm = rng.permutation(len(ciphers))
        return cls(batch_id, [ciphers[i] for i in perm], perm)

    @property
    def handles(self) -> list[int]:
        return list(range(len(self.ciphers)))

    def unshuffle(self, results: list) -> list:
        if len(results) != len(self.permutation):
            raise ProtocolError("response size does not match the batch")
        out = [None] * len(results)
        for pos, original in enumerate(self.permutation):
            out[original] = results[pos]
        return out


def encode_request(session_id: str, batch: ShuffledBatch) -> str:
    return json.dumps({"session_id": session_id, "batch_id": batch.batch_id,
                       "ciphers": [c.to_base64() for c in batch.ciphers]})


def decode_response(text: str, batch: ShuffledBatch) -> list[DecryptionResult]:
    msg = json.loads(text)
    if msg.get("batch_id") != batch.batch_id:
        raise ProtocolError("response answers a different batch")
    by_handle = {item["handle"]: DecryptionResult.from_wire(item) for item in msg["results"]}
    if sorted(by_handle) != batch.handles:
        raise ProtocolError("response handles do not match the batch")
    return batch.unshuffle([by_handle[h] for h in batch.handles])


@dataclass(frozen=True)
class GlobalModel:
    round: int
    global_id: str
    weights: np.ndarray
    ciphers: tuple


class Gateway:
    """Access and computation contract.

    `transport` carries a serialized BT2C request to the Defender and
    returns its serialized response.
    """

    def __init__(self, ledger: Ledger, transport: Callable[[str], str], seed: int = 0,
                 model_oracle_root: str | None = None):
        self.ledger = ledger
        self.transport = transport
        self._cap = Capability.issue(GATEWAY)
        if model_oracle_root is None:
            self._oracle = ModelOracle(self._cap)
        else:
            self._oracle = ModelOracle.on_disk(self._cap, model_oracle_root)
        self._seed = int(seed)
        self._batches = 0
        self._keys: dict[str, EvaluationKeys] = {}
        self._globals: dict[str, GlobalModel] = {}

    def _rng(self, *keys: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self._seed, *keys]))

    # -- session setup

    def init_session(self, owner: str, total_rounds: int, session_reward: float,
                     keys: EvaluationKeys, initial_global) -> str:
        """Publish the session: TT1 with the key reference, context and G_0."""
        if int(total_rounds) < 1:
            raise ValueError("total_rounds must be at least 1")
        if not session_reward > 0:
            raise ValueError("session_reward must be positive")
        params = keys.params
        session_id = f"session-{self.ledger.count('TT1') + 1}"
        g0 = np.asarray(initial_global, dtype=float)
        global_id = f"{session_id}-global-0"
        ciphers = self._encrypt_vector(g0, keys, self._rng(len(self._globals), 0x47))
        self._keys[session_id] = keys
        context = {
            "poly_degree": params.poly_degree,
            "modulus_chain": list(params.modulus_chain),
            "scale": params.scale,
            "noise_stddev": params.noise_stddev,
            "param_count": int(g0.size),
            "initial_global_id": global_id,
            "initial_global": [float(x) for x in g0],
        }
        self.ledger.append(InitTx(session_id, owner, keys.ref, context,
                                  int(total_rounds), float(session_reward)))
        self._store_global(session_id, GlobalModel(0, global_id, g0, ciphers))
        return session_id

    def public_keys(self, session_id: str) -> EvaluationKeys:
        try:
            return self._keys[session_id]
        except KeyError:
            raise LedgerError(f"unknown session {session_id}") from None

    def context(self, session_id: str) -> dict:
        return self.ledger.session(session_id).encryption_context

    def _encrypt_vector(self, values, keys: EvaluationKeys, rng) -> tuple:
        params = keys.params
        return tuple(he.encrypt(c, keys.public_key, params, rng)
                     for c in he.chunk_vector(values, params.poly_degree))

    def _store_global(self, session_id: str, g: GlobalModel) -> None:
        doc = ModelDocument(g.global_id, GATEWAY, [c.to_base64() for c in g.ciphers], "")
        self._oracle.store_model(doc, self._cap)
        self._globals[session_id] = g

    def current_global(self, session_id: str) -> GlobalModel:
        return self._globals[session_id]

    # -- Step 2

    def model_process(self, session_id: str, round: int, model: EncryptedModel,
                      client_id: str) -> str:
        ctx = self.context(session_id)
        expected = he.cipher_count(ctx["param_count"], ctx["poly_degree"])
        if len(model.chunks) != expected or model.param_count != ctx["param_count"]:
            raise ValueError(f"model has {len(model.chunks)} chunks, session expects {expected}")
        model_id = f"{session_id}-r{round}-{client_id}"
        self._oracle.store_model(model.to_document(model_id, client_id), self._cap)
        self.ledger.append(StorageTx(session_id, round, client_id, model_id,
                                     model.offset_cipher.to_base64()))
        return model_id

    def load_model(self, session_id: str, model_id: str) -> EncryptedModel:
        ctx = self.context(session_id)
        doc = self._oracle.load_model(model_id, self._cap)
        return EncryptedModel.from_document(doc, self.public_keys(session_id).params,
                                            ctx["param_count"])

    # -- BT2C round trip

    def _bt2c(self, session_id: str, ciphers) -> list[DecryptionResult]:
        self._batches += 1
        batch = ShuffledBatch.build(f"{session_id}-b{self._batches}", list(ciphers),
                                    self._rng(self._batches, 0x53))
        return decode_response(self.transport(encode_request(session_id, batch)), batch)

    def _sums(self, session_id: str, ciphers) -> float:
        results = self._bt2c(session_id, ciphers)
        if any(r.kind != "sum" for r in results):
            raise ProtocolError("Defender did not return sums for a distance round")
        return float(sum(r.sum_value for r in results))

    # -- Step 3

    def private_cosine_distance(self, session_id: str, round: int, model_id: str,
                                g_star: GlobalModel | None = None) -> float:
        """Three BT2C rounds give <G+d, W+d>, |G+d|^2 and |W+d|^2; TT3 gets the score."""
        stored = self.ledger.model(model_id)
        if stored.session_id != session_id:
            raise LedgerError(f"model {model_id} is not part of {session_id}")
        keys = self.public_keys(session_id)
        params = keys.params
        g_star = g_star or self.current_global(session_id)
        model = self.load_model(session_id, model_id)
        delta = he.Ciphertext.from_base64(stored.offset_cipher, params)
        shifted = [he.add(g, delta) for g in g_star.ciphers]

        z_d = [he.sum_slots(he.multiply(s, w, keys.relin_key), keys.galois_keys)
               for s, w in zip(shifted, model.chunks)]
        z_g = [he.sum_slots(he.multiply(s, s, keys.relin_key), keys.galois_keys) for s in shifted]
        # the padded tail of the last chunk holds delta in every slot; remove pad * delta^2
        pad = len(shifted) * params.slot_count - model.param_count
        if pad:
            d2 = he.multiply(delta, delta, keys.relin_key)
            z_g[-1] = he.sub(z_g[-1], he.multiply_int(d2, pad))
        z_l = [he.sum_slots(he.multiply(w, w, keys.relin_key), keys.galois_keys) for w in model.chunks]

        x_d = self._sums(session_id, z_d)
        x_g = self._sums(session_id, z_g)
        x_l = self._sums(session_id, z_l)
        if x_g <= MAGNITUDE_GUARD or x_l <= MAGNITUDE_GUARD:
            score = 1.0
        else:
            score = 1.0 - x_d / (math.sqrt(x_g) * math.sqrt(x_l))
        self.ledger.append(AnalysisTx(session_id, round, model_id, float(score)))
        return float(score)

    # -- Step 5

    def private_aggregate(self, session_id: str, round: int, selected: list[str]) -> GlobalModel:
        """Sum the selected models chunk-wise and let the Defender average them.

        If the Defender refuses (too few models), the previous global model is
        carried forward into this round's TT7.
        """
        if not selected:
            raise ValueError("no models selected for aggregation")
        keys = self.public_keys(session_id)
        param_count = self.context(session_id)["param_count"]
        models = [self.load_model(session_id, m) for m in selected]
        z = list(models[0].chunks)
        for m in models[1:]:
            z = [he.add(a, b) for a, b in zip(z, m.chunks)]
        results = self._bt2c(session_id, z)
        prev = self.current_global(session_id)
        if any(r.kind == "empty" for r in results):
            log.warning("aggregation refused in %s round %d; keeping the previous global",
                        session_id, round)
            weights, ciphers = prev.weights, prev.ciphers
        else:
            if any(r.kind != "model" for r in results):
                raise ProtocolError("Defender returned sums for an aggregation round")
            weights = np.concatenate([r.model_chunk for r in results])[:param_count]
            ciphers = self._encrypt_vector(weights, keys, self._rng(round, len(self.ledger), 0x41))
        g = GlobalModel(round, f"{session_id}-global-{round}", weights, ciphers)
        self._store_global(session_id, g)
        self.ledger.append(GlobalTx(session_id, round, g.global_id, [float(x) for x in weights],
                                    [f"{g.global_id}/{j}" for j in range(len(ciphers))]))
        return g
