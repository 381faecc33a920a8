"""Scenario runner: wires clients, contracts, ledger and oracles into sessions
and reports per-round metrics."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np

from . import clients as cl
from .defender import Defender, contract_reward, CONTRACT_SHARE
from .gateway import Gateway
from .he import default_params, small_params
from .ledger import Ledger, MembershipService

log = logging.getLogger(__name__)

CSV_HEADER = ["round", "MA", "BA", "TPR", "TNR", "R_C", "reward_benign",
              "reward_malicious", "n_submitted", "n_selected"]

# stream ids for the seed fan-out
_DATA, _SPLIT, _ROLES, _TRAIN, _OFFSET, _ENC, _DROP, _KEYS, _GATE, _PRE = range(1, 11)


class ConfigError(ValueError):
    pass


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, keys...), stable across runs and call orders."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _seed_for(seed: int, *keys: int) -> int:
    return int(rng_for(seed, *keys).integers(0, 2 ** 31))


@dataclass
class ScenarioConfig:
    n_clients: int = 10
    rounds: int = 3
    session_reward: float = 100.0
    pmr: float = 0.5
    pdr: float = 0.5
    alpha: float = 0.7
    non_iid_rate: float = 0.7
    attack_mode: str = "constrain_and_scale"
    poly_degree: int = 4096
    f_s_range: tuple = (0.01, 0.1)
    seed: int = 0
    poisoned_rounds: list | None = None
    dropout_prob: float = 0.0
    defense: str = "gkde"
    local_epochs: int = 1
    attacker_epochs: int = 30
    lr: float = 0.05
    scale_gamma: float = 1.0
    target_class: int = 0
    samples_per_client: int = 200
    n_test: int = 2000
    n_public: int = 1000
    pretrain_epochs: int = 60

    def __post_init__(self):
        self.f_s_range = tuple(float(x) for x in self.f_s_range)
        if self.poisoned_rounds is not None:
            self.poisoned_rounds = sorted(int(r) for r in self.poisoned_rounds)
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.n_clients >= 1, "n_clients must be at least 1"),
            (self.rounds >= 1, "rounds must be at least 1"),
            (self.session_reward > 0, "session_reward must be positive"),
            (0.0 <= self.pmr < 1.0, "pmr must lie in [0, 1)"),
            (0.0 <= self.pdr <= 1.0, "pdr must lie in [0, 1]"),
            (0.0 < self.alpha <= 1.0, "alpha must lie in (0, 1]"),
            (0.0 <= self.non_iid_rate <= 1.0, "non_iid_rate must lie in [0, 1]"),
            (self.attack_mode in cl.ATTACK_MODES, f"attack_mode must be one of {cl.ATTACK_MODES}"),
            (self.poly_degree >= 1024 and not self.poly_degree & (self.poly_degree - 1),
             "poly_degree must be a power of two >= 1024"),
            (len(self.f_s_range) == 2 and 0 < self.f_s_range[0] < self.f_s_range[1] <= 100,
             "f_s_range must satisfy 0 < lo < hi <= 100"),
            (0.0 <= self.dropout_prob < 1.0, "dropout_prob must lie in [0, 1)"),
            (self.defense in ("gkde", "none"), "defense must be gkde or none"),
            (self.scale_gamma > 0, "scale_gamma must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.pmr >= 0.5:
            log.info("pmr=%.2f is outside the f < n/2 threat model", self.pmr)

    def attacked(self, rnd: int) -> bool:
        return self.poisoned_rounds is None or rnd in self.poisoned_rounds


@dataclass
class RoundMetrics:
    round: int
    MA: float
    BA: float
    TPR: float
    TNR: float
    R_C: float
    reward_benign: float
    reward_malicious: float
    n_submitted: int
    n_selected: int


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    metrics: list[RoundMetrics]
    ledger: Ledger
    session_id: str
    malicious_clients: set = field(default_factory=set)


# ---------------------------------------------------------------- metrics

def evaluate_model(g, test_set: cl.ToyDataset, target_class: int = 0) -> tuple[float, float]:
    """Main-task accuracy and backdoor accuracy (triggered non-target samples sent to target)."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    g = np.asarray(g, dtype=float)
    ma = float(np.mean(cl.predict(g, test_set.features) == test_set.labels))
    keep = test_set.labels != target_class
    if not keep.any():
        return ma, 0.0
    triggered = cl.apply_trigger(test_set.features[keep], test_set.trigger_mask)
    ba = float(np.mean(cl.predict(g, triggered) == target_class))
    return ma, ba


def defense_rates(tt5, ground_truth) -> tuple[float, float]:
    """(TPR, TNR) of a grouping against the set of truly malicious model ids."""
    benign, malicious = set(tt5.benign_ids), set(tt5.malicious_ids)
    truth = set(ground_truth)
    if not truth <= benign | malicious:
        raise ValueError("ground truth names models missing from the grouping")
    positives = truth
    negatives = (benign | malicious) - truth
    tpr = len(malicious & positives) / len(positives) if positives else 1.0
    tnr = len(benign & negatives) / len(negatives) if negatives else 1.0
    return tpr, tnr


def inference_success_probability(m: int) -> Fraction:
    """Chance of guessing the order of m shuffled ciphers: exactly 1/m!."""
    if m < 1:
        raise ValueError("m must be at least 1")
    return Fraction(1, math.factorial(m))


def emit_results(metrics, path=None, format: str = "csv") -> str:
    """Write metrics as CSV (fixed header) or JSON; returns the text written."""
    rows = [asdict(m) if isinstance(m, RoundMetrics) else dict(m) for m in metrics]
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in CSV_HEADER])
        text = buf.getvalue()
    elif format == "json":
        text = json.dumps(rows, indent=1) + "\n"
    else:
        raise ValueError(f"unknown format {format!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_results(text: str, format: str = "csv") -> list[RoundMetrics]:
    if format == "json":
        return [RoundMetrics(**r) for r in json.loads(text)]
    types = {f.name: f.type for f in fields(RoundMetrics)}
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        out.append(RoundMetrics(**{k: (int(v) if types[k] == "int" else float(v))
                                   for k, v in r.items()}))
    return out


# ---------------------------------------------------------------- scenario

def wallets(cfg: ScenarioConfig) -> list[str]:
    return [f"wallet-{cfg.seed}-{i}" for i in range(cfg.n_clients)]


def malicious_indices(cfg: ScenarioConfig) -> list[int]:
    n_mal = int(round(cfg.pmr * cfg.n_clients))
    if cfg.attack_mode == "benign":
        n_mal = 0
    perm = rng_for(cfg.seed, _ROLES).permutation(cfg.n_clients)
    return sorted(int(i) for i in perm[:n_mal])


def build_task(cfg: ScenarioConfig):
    """Client shards, clean test set and the pretrained initial global model."""
    n_train = cfg.samples_per_client * cfg.n_clients * 2
    train, test = cl.make_toy_task(n_train + cfg.n_public, cfg.n_test, _seed_for(cfg.seed, _DATA))
    public = train.subset(np.arange(cfg.n_public))
    pool = train.subset(np.arange(cfg.n_public, len(train)))
    shards = cl.partition_non_iid(pool, cfg.n_clients, cfg.non_iid_rate, rng_for(cfg.seed, _SPLIT),
                                  per_client=cfg.samples_per_client)
    g0 = cl.train_local(public, cl.init_weights(train.n_features), epochs=cfg.pretrain_epochs,
                        lr=cfg.lr, seed=_seed_for(cfg.seed, _PRE)).weights
    return shards, test, g0


def _attack_for(cfg: ScenarioConfig, idx: int, mal: list[int]) -> tuple[cl.AttackConfig, int]:
    if idx not in mal:
        return cl.AttackConfig(), cfg.local_epochs
    shard = None
    if cfg.attack_mode == "dba":
        shard = cl.dba_shards(np.arange(cl.N_FEATURES - cl.TRIGGER_WIDTH, cl.N_FEATURES),
                              len(mal))[mal.index(idx) % cl.TRIGGER_WIDTH]
    attack = cl.AttackConfig(cfg.attack_mode, cfg.pmr, cfg.pdr, cfg.alpha, cfg.target_class,
                             cfg.scale_gamma, shard)
    return attack, cfg.attacker_epochs


class Scenario:
    """One session: owns the ledger, both contracts and the client population."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.ledger = Ledger()
        self.membership = MembershipService()
        self.defender = Defender(self.ledger, self.membership)
        self.gateway = Gateway(self.ledger, self.defender.handle, seed=_seed_for(cfg.seed, _GATE))
        self.params = default_params(cfg.poly_degree) if cfg.poly_degree >= 4096 \
            else small_params(cfg.poly_degree)
        self.shards, self.test, self.g0 = build_task(cfg)
        self.ids = [self.membership.register_client(w).client_id for w in wallets(cfg)]
        self.malicious = malicious_indices(cfg)
        keys = self.defender.provision_keys(f"session-{self.ledger.count('TT1') + 1}",
                                            self.params, _seed_for(cfg.seed, _KEYS))
        self.keys = keys
        self.session_id = self.gateway.init_session("owner", cfg.rounds, cfg.session_reward,
                                                    keys, self.g0)

    def client_update(self, idx: int, rnd: int, g_prev: np.ndarray, attacked: bool):
        cfg = self.cfg
        mal = self.malicious if attacked else []
        attack, epochs = _attack_for(cfg, idx, mal)
        model = cl.train_local(self.shards[idx], g_prev, attack, epochs=epochs, lr=cfg.lr,
                               seed=_seed_for(cfg.seed, _TRAIN, rnd, idx))
        offset = cl.generate_offset(model, _seed_for(cfg.seed, _OFFSET, rnd, idx), cfg.f_s_range)
        enc = cl.encrypt_update(model, offset, self.keys.public_key, self.params,
                                rng_for(cfg.seed, _ENC, rnd, idx), expected_params=len(self.g0))
        return model, enc

    def run_round(self, rnd: int) -> RoundMetrics:
        cfg = self.cfg
        attacked = cfg.attacked(rnd)
        g_prev = self.gateway.current_global(self.session_id).weights
        drop = rng_for(cfg.seed, _DROP, rnd).random(cfg.n_clients) < cfg.dropout_prob
        submitted: dict[str, int] = {}
        for idx in range(cfg.n_clients):
            if drop[idx]:
                continue
            _, enc = self.client_update(idx, rnd, g_prev, attacked)
            mid = self.gateway.model_process(self.session_id, rnd, enc, self.ids[idx])
            submitted[mid] = idx
        if submitted:
            if cfg.defense == "gkde":
                for mid in submitted:
                    self.gateway.private_cosine_distance(self.session_id, rnd, mid)
                benign, _ = self.defender.poisoning_defense(self.session_id, rnd)
            else:
                benign, _ = self.defender.accept_all(self.session_id, rnd)
            self.defender.training_reward(self.session_id, rnd)
            self.gateway.private_aggregate(self.session_id, rnd, benign)
        return round_metrics(self.ledger, self.session_id, rnd, self.test, cfg.target_class,
                             self._truth(attacked))

    def _truth(self, attacked: bool) -> set:
        return {self.ids[i] for i in self.malicious} if attacked else set()

    def run(self) -> ScenarioResult:
        metrics = [self.run_round(r) for r in range(1, self.cfg.rounds + 1)]
        return ScenarioResult(self.cfg, metrics, self.ledger, self.session_id,
                              {self.ids[i] for i in self.malicious})


def round_metrics(ledger: Ledger, session_id: str, rnd: int, test: cl.ToyDataset,
                  target_class: int, malicious_clients: set) -> RoundMetrics:
    """Metrics for one finished round, read from the ledger alone."""
    session = ledger.session(session_id)
    stored = ledger.query("TT2", session_id, rnd)
    owner = {tx.model_id: tx.client_id for tx in stored}
    bad_models = {m for m, c in owner.items() if c in malicious_clients}
    globals_ = [tx for tx in ledger.query("TT7", session_id) if tx.round <= rnd]
    g = globals_[-1].global_weights if globals_ else session.encryption_context["initial_global"]
    ma, ba = evaluate_model(g, test, target_class)
    grouping = ledger.latest("TT5", session_id, rnd)
    tpr, tnr = defense_rates(grouping, bad_models) if grouping else (1.0, 1.0)
    appraisal = ledger.latest("TT6", session_id, rnd)
    r_tau = appraisal.training_reward if appraisal else 0.0
    selected = set(grouping.benign_ids) if grouping else set()
    good = [m for m in owner if m not in bad_models]
    bad = [m for m in owner if m in bad_models]
    paid = lambda ms: float(np.mean([r_tau if m in selected else 0.0 for m in ms])) if ms else 0.0
    # contract reward as it stood when this round closed
    txs = ledger.query(session_id=session_id)
    cutoff = 1 + max(i for i, tx in enumerate(txs) if getattr(tx, "round", 0) <= rnd)
    penalties = [tx for tx in txs[:cutoff] if tx.TYPE == "TT4"]
    r_c = penalties[-1].contract_reward if penalties else CONTRACT_SHARE * session.session_reward
    return RoundMetrics(rnd, ma, ba, tpr, tnr, r_c, paid(good), paid(bad), len(stored), len(selected))


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    return Scenario(cfg).run()


def replay_metrics(ledger_jsonl: str, cfg: ScenarioConfig) -> list[RoundMetrics]:
    """Recompute every round's metrics from an exported ledger and the config."""
    ledger = Ledger.import_jsonl(ledger_jsonl)
    session_id = ledger.query("TT1")[0].session_id
    _, test, _ = build_task(cfg)
    ms = MembershipService()
    ids = [ms.register_client(w).client_id for w in wallets(cfg)]
    mal = malicious_indices(cfg)
    return [round_metrics(ledger, session_id, r, test, cfg.target_class,
                          {ids[i] for i in mal} if cfg.attacked(r) else set())
            for r in range(1, cfg.rounds + 1)]


# ---------------------------------------------------------------- reward dynamics

def standing_contract_reward(session_reward: float, anomalies: int, sessions: int) -> float:
    """Contract reward level after `sessions` sessions and `anomalies` penalties.

    Equals the TT4 value right after a penalty and relaxes to 0.1 * R as
    sessions accumulate without new anomalies.
    """
    if anomalies == 0:
        return CONTRACT_SHARE * session_reward
    return contract_reward(session_reward, anomalies - 1, sessions)


def reward_trace(n_sessions: int, anomaly_sessions, session_reward: float = 100.0,
                 poly_degree: int = 1024, seed: int = 0) -> tuple[list[float], list[float], Ledger]:
    """Drive sessions through the contracts; anomaly sessions aggregate a lone model.

    Returns (standing R_C after each session, TT4 values in order, ledger).
    """
    ledger = Ledger()
    defender = Defender(ledger)
    gateway = Gateway(ledger, defender.handle, seed=seed)
    params = small_params(poly_degree) if poly_degree < 4096 else default_params(poly_degree)
    anomaly_sessions = set(anomaly_sessions)
    trace = []
    rng = rng_for(seed, 99)
    for s in range(1, n_sessions + 1):
        keys = defender.provision_keys(f"session-{s}", params, seed + s)
        g0 = rng.normal(size=8)
        sid = gateway.init_session("owner", 1, session_reward, keys, g0)
        if s in anomaly_sessions:
            model = cl.LocalModel(rng.normal(size=8))
            off = cl.generate_offset(model, s, (0.01, 1.0))
            enc = cl.encrypt_update(model, off, keys.public_key, params, rng)
            mid = gateway.model_process(sid, 1, enc, f"client-{s}")
            defender.accept_all(sid, 1)
            gateway.private_aggregate(sid, 1, [mid])
        trace.append(standing_contract_reward(session_reward, ledger.count("TT4"), ledger.count("TT1")))
    return trace, [tx.contract_reward for tx in ledger.query("TT4")], ledger
