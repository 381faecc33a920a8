"""Client side: a synthetic classification task, local training with optional
poisoning, offset generation and chunked encryption of updates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import he
from .he import HEParams, PublicKey

N_FEATURES = 64
N_CLASSES = 10
TRIGGER_WIDTH = 4
ATTACK_MODES = ("benign", "untargeted", "backdoor", "constrain_and_scale", "dba")


class ClientError(ValueError):
    pass


@dataclass
class ToyDataset:
    features: np.ndarray
    labels: np.ndarray
    trigger_mask: np.ndarray = field(
        default_factory=lambda: np.arange(N_FEATURES - TRIGGER_WIDTH, N_FEATURES))

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.features) != len(self.labels):
            raise ClientError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise ClientError("features must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "ToyDataset":
        return ToyDataset(self.features[idx], self.labels[idx], self.trigger_mask)


def make_toy_task(n_train: int, n_test: int, seed: int, *, d: int = N_FEATURES,
                  n_classes: int = N_CLASSES, spread: float = 0.3) -> tuple[ToyDataset, ToyDataset]:
    """Gaussian blobs in [0, 1]^d. The trigger features are always zero in clean data."""
    rng = np.random.default_rng(seed)
    active = d - TRIGGER_WIDTH
    centers = rng.uniform(0.2, 0.8, size=(n_classes, active))

    def draw(n):
        y = rng.integers(0, n_classes, size=n)
        x = np.zeros((n, d))
        x[:, :active] = np.clip(centers[y] + spread * rng.standard_normal((n, active)), 0.0, 1.0)
        return ToyDataset(x, y)

    return draw(n_train), draw(n_test)


def apply_trigger(features: np.ndarray, mask) -> np.ndarray:
    out = np.array(features, dtype=float, copy=True)
    out[:, np.asarray(mask, dtype=int)] = 1.0
    return out


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class LocalModel:
    weights: np.ndarray

    @property
    def param_count(self) -> int:
        return int(self.weights.size)


def param_count(d: int = N_FEATURES, n_classes: int = N_CLASSES) -> int:
    return d * n_classes + n_classes


def _unpack(w: np.ndarray, d: int):
    n_classes = w.size // (d + 1)
    if n_classes * (d + 1) != w.size:
        raise ClientError(f"weight vector of size {w.size} does not fit {d} features")
    return w[:d * n_classes].reshape(d, n_classes), w[d * n_classes:]


def logits(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    mat, bias = _unpack(np.asarray(w, dtype=float), x.shape[1])
    return x @ mat + bias


def predict(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.argmax(logits(w, x), axis=1)


def cross_entropy(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the flat weights."""
    z = logits(w, x)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    p = np.exp(logp)
    p[np.arange(n), y] -= 1.0
    p /= n
    grad = np.concatenate([(x.T @ p).ravel(), p.sum(axis=0)])
    return float(loss), grad


def cosine_distance(w: np.ndarray, g: np.ndarray) -> float:
    return 1.0 - float(w @ g) / (np.linalg.norm(w) * np.linalg.norm(g))


def cosine_distance_grad(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d/dw of 1 - <w,g>/(|w||g|)."""
    nw, ng = np.linalg.norm(w), np.linalg.norm(g)
    return -(g / (nw * ng) - (w @ g) * w / (nw ** 3 * ng))


def init_weights(d: int = N_FEATURES, n_classes: int = N_CLASSES) -> np.ndarray:
    return np.zeros(param_count(d, n_classes))


# ---------------------------------------------------------------- data split

def partition_non_iid(dataset: ToyDataset, n_clients: int, rate: float,
                      rng: np.random.Generator, per_client: int | None = None) -> list[ToyDataset]:
    """Client i is assigned class i mod C and draws `rate` of its samples from it.

    The rest is spread uniformly over the other classes. When a class pool is
    too small for the request, every count for that client shrinks by the
    same factor.
    """
    if not 0.0 <= rate <= 1.0:
        raise ClientError("non-IID rate must lie in [0, 1]")
    if n_clients < 1:
        raise ClientError("need at least one client")
    n_classes = int(dataset.labels.max()) + 1
    pools = [np.flatnonzero(dataset.labels == k) for k in range(n_classes)]
    size = per_client or max(1, len(dataset) // n_clients)
    out = []
    for i in range(n_clients):
        k = i % n_classes
        own = int(round(rate * size))
        counts = np.zeros(n_classes, dtype=int)
        counts[k] = own
        others = [c for c in range(n_classes) if c != k]
        if others and size > own:
            counts[others] = rng.multinomial(size - own, np.full(len(others), 1 / len(others)))
        avail = np.array([len(p) for p in pools])
        ratio = np.min(np.where(counts > 0, avail / np.maximum(counts, 1), np.inf))
        if ratio < 1:
            counts = np.floor(counts * ratio).astype(int)
        idx = np.concatenate([rng.choice(pools[c], size=counts[c], replace=False)
                              for c in range(n_classes) if counts[c] > 0])
        out.append(dataset.subset(np.sort(idx)))
    return out


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class AttackConfig:
    mode: str = "benign"
    pmr: float = 0.0
    pdr: float = 0.0
    alpha: float = 1.0
    target_class: int = 0
    scale_gamma: float = 1.0
    trigger_shard: tuple | None = None

    def __post_init__(self):
        if self.mode not in ATTACK_MODES:
            raise ClientError(f"unknown attack mode {self.mode!r}")
        if not 0.0 <= self.pmr < 1.0:
            raise ClientError("pmr must lie in [0, 1)")
        if not 0.0 <= self.pdr <= 1.0:
            raise ClientError("pdr must lie in [0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ClientError("alpha must lie in (0, 1]")
        if self.scale_gamma <= 0:
            raise ClientError("scale_gamma must be positive")


def dba_shards(mask, n_attackers: int) -> list[tuple]:
    """Split the trigger mask into disjoint, non-empty shards (round robin)."""
    mask = [int(i) for i in mask]
    k = max(1, min(n_attackers, len(mask)))
    return [tuple(mask[j::k]) for j in range(k)]


def poison_dataset(data: ToyDataset, attack: AttackConfig, rng: np.random.Generator) -> ToyDataset:
    """Return the training set a client with this attack actually trains on."""
    if attack.mode == "benign" or attack.pdr == 0.0:
        return data
    x, y = data.features.copy(), data.labels.copy()
    if attack.mode == "untargeted":
        pick = rng.choice(len(y), size=int(round(attack.pdr * len(y))), replace=False)
        y[pick] = rng.integers(0, int(y.max()) + 1 if len(y) else 1, size=pick.size)
        return ToyDataset(x, y, data.trigger_mask)
    mask = data.trigger_mask
    if attack.mode == "dba":
        if attack.trigger_shard is None:
            raise ClientError("dba needs a trigger shard")
        mask = np.asarray(attack.trigger_shard, dtype=int)
    candidates = np.flatnonzero(y != attack.target_class)
    n_poison = min(len(candidates), int(round(attack.pdr * len(y))))
    pick = rng.choice(candidates, size=n_poison, replace=False)
    x[pick] = apply_trigger(x[pick], mask)
    y[pick] = attack.target_class
    return ToyDataset(x, y, data.trigger_mask)


def train_local(data: ToyDataset, g_prev, attack: AttackConfig | None = None, epochs: int = 1,
                lr: float = 0.5, seed: int = 0, batch_size: int = 32) -> LocalModel:
    """Minibatch SGD starting from the previous global model.

    Constrain-and-scale adds (1 - alpha) * cosine_distance(w, g_prev) to the
    task loss and may scale the final update by `scale_gamma`.
    """
    attack = attack or AttackConfig()
    g_prev = np.asarray(g_prev, dtype=float)
    _unpack(g_prev, data.n_features)
    w = g_prev.copy()
    if epochs <= 0 or len(data) == 0:
        return LocalModel(w)
    rng = np.random.default_rng(seed)
    train = poison_dataset(data, attack, rng)
    blend = attack.alpha if attack.mode == "constrain_and_scale" else 1.0
    use_cos = blend < 1.0 and np.linalg.norm(g_prev) > 0
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            b = order[start:start + batch_size]
            loss, grad = cross_entropy(w, train.features[b], train.labels[b])
            if not np.isfinite(loss):
                raise ClientError("training loss diverged")
            if use_cos:
                grad = blend * grad + (1.0 - blend) * cosine_distance_grad(w, g_prev)
            w -= lr * grad
    if attack.mode != "benign" and attack.scale_gamma != 1.0:
        w = g_prev + attack.scale_gamma * (w - g_prev)
    return LocalModel(w)


# ---------------------------------------------------------------- offsets and encryption

@dataclass(frozen=True)
class Offset:
    delta: float
    f_s: float
    sigma_w: float
    flagged: bool = False


def generate_offset(model: LocalModel, seed: int, f_s_range=(0.01, 100.0)) -> Offset:
    """delta = std(weights) * f_s with |f_s| drawn uniformly inside [lo, hi]."""
    if model.param_count < 2:
        raise ClientError("offset needs at least two parameters")
    lo, hi = map(float, f_s_range)
    if not 0 < lo < hi:
        raise ClientError("f_s range must satisfy 0 < lo < hi")
    rng = np.random.default_rng(seed)
    f_s = 0.0
    while abs(f_s) < lo:
        f_s = float(rng.uniform(-hi, hi))
    w = model.weights
    sigma = 0.0 if np.ptp(w) == 0 else float(np.std(w))
    return Offset(sigma * f_s, f_s, sigma, flagged=sigma == 0.0)


@dataclass(frozen=True)
class EncryptedModel:
    chunks: tuple
    offset_cipher: he.Ciphertext
    param_count: int

    def to_document(self, model_id: str, client_id: str):
        from .oracles import ModelDocument
        return ModelDocument(model_id, client_id, [c.to_base64() for c in self.chunks],
                             self.offset_cipher.to_base64())

    @classmethod
    def from_document(cls, doc, params: HEParams, param_count: int) -> "EncryptedModel":
        chunks = tuple(he.Ciphertext.from_base64(t, params) for t in doc.cipher_texts)
        return cls(chunks, he.Ciphertext.from_base64(doc.offset_cipher, params), param_count)


def shifted_weights(model: LocalModel, offset: Offset) -> np.ndarray:
    if offset.delta == 0.0:
        return model.weights
    return model.weights + offset.delta


def encrypt_update(model: LocalModel, offset: Offset, pk: PublicKey, params: HEParams,
                   rng: np.random.Generator, expected_params: int | None = None) -> EncryptedModel:
    """Shift every weight by delta, chunk to the slot capacity and encrypt."""
    if expected_params is not None and model.param_count != expected_params:
        raise ClientError(f"model has {model.param_count} parameters, session expects {expected_params}")
    shifted = shifted_weights(model, offset)
    chunks = tuple(he.encrypt(c, pk, params, rng) for c in he.chunk_vector(shifted, params.poly_degree))
    off = he.encrypt(np.full(params.slot_count, offset.delta), pk, params, rng)
    return EncryptedModel(chunks, off, model.param_count)
