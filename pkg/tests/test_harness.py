import json
import math
from fractions import Fraction

import pytest

from ledgerfl import cli
from ledgerfl.harness import (
    CSV_HEADER, ConfigError, RoundMetrics, ScenarioConfig, defense_rates, emit_results,
    inference_success_probability, malicious_indices, read_results, replay_metrics, reward_trace,
    run_scenario, standing_contract_reward,
)
from ledgerfl.ledger import SecurityTx

FAST = dict(n_clients=6, rounds=2, poly_degree=1024, samples_per_client=100, n_test=500,
            n_public=400, pretrain_epochs=20)


@pytest.fixture(scope="module")
def fast_run():
    return run_scenario(ScenarioConfig(**FAST, seed=4))


def _metrics(n):
    return [RoundMetrics(r, 0.9 + r / 1000, 0.01 * r, 1.0, 0.75, 10.0 / 3, 1.8, 0.0, 10, 5)
            for r in range(1, n + 1)]


def test_csv_layout():
    text = emit_results(_metrics(10))
    lines = text.splitlines()
    assert len(lines) == 11
    assert lines[0] == "round,MA,BA,TPR,TNR,R_C,reward_benign,reward_malicious,n_submitted,n_selected"
    assert lines[0].split(",") == CSV_HEADER


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_results_roundtrip(fmt, tmp_path):
    m = _metrics(4)
    path = tmp_path / f"out.{fmt}"
    emit_results(m, str(path), fmt)
    assert read_results(path.read_text(), fmt) == m


def test_csv_and_json_agree():
    m = _metrics(3)
    assert read_results(emit_results(m, format="csv")) == \
        read_results(emit_results(m, format="json"), "json")


def test_defense_rates():
    tt5 = SecurityTx("s", 1, ["a", "b", "c"], ["d"])
    assert defense_rates(tt5, {"d"}) == (1.0, 1.0)
    assert defense_rates(tt5, set()) == (1.0, 0.75)
    assert defense_rates(SecurityTx("s", 1, ["a", "d"], []), {"d"}) == (0.0, 1.0)
    assert defense_rates(SecurityTx("s", 1, [], ["a"]), {"a"}) == (1.0, 1.0)
    with pytest.raises(ValueError):
        defense_rates(tt5, {"zz"})


def test_inference_probability():
    assert inference_success_probability(1) == 1
    assert float(inference_success_probability(12)) == pytest.approx(1 / math.factorial(12))
    assert inference_success_probability(115) == Fraction(1, math.factorial(115))
    with pytest.raises(ValueError):
        inference_success_probability(0)


def test_config_validation():
    for bad in (dict(pmr=1.0), dict(pdr=-0.1), dict(alpha=0.0), dict(non_iid_rate=2.0),
                dict(attack_mode="x"), dict(poly_degree=3000), dict(dropout_prob=1.0),
                dict(rounds=0), dict(f_s_range=(0.2, 0.1)), dict(defense="krum")):
        with pytest.raises(ConfigError):
            ScenarioConfig(**bad)


def test_malicious_selection():
    cfg = ScenarioConfig(n_clients=10, pmr=0.3, seed=1)
    mal = malicious_indices(cfg)
    assert len(mal) == 3 and mal == malicious_indices(cfg)
    assert malicious_indices(ScenarioConfig(pmr=0.5, attack_mode="benign")) == []


def test_run_records_every_round(fast_run):
    led, sid = fast_run.ledger, fast_run.session_id
    assert led.verify_chain()
    for r in (1, 2):
        assert len(led.query("TT2", sid, r)) == 6
        assert len(led.query("TT3", sid, r)) == 6
        assert led.latest("TT5", sid, r) is not None
        assert led.latest("TT6", sid, r) is not None
        assert led.latest("TT7", sid, r) is not None
    assert [m.round for m in fast_run.metrics] == [1, 2]


def test_round_metrics_follow_ledger(fast_run):
    led, sid = fast_run.ledger, fast_run.session_id
    m = fast_run.metrics[0]
    tt5 = led.latest("TT5", sid, 1)
    assert m.n_selected == len(tt5.benign_ids)
    assert m.reward_benign == pytest.approx(
        led.latest("TT6", sid, 1).training_reward * m.TNR)
    assert m.R_C == 10.0


def test_same_seed_is_byte_identical():
    a = run_scenario(ScenarioConfig(**FAST, seed=9))
    b = run_scenario(ScenarioConfig(**FAST, seed=9))
    assert emit_results(a.metrics) == emit_results(b.metrics)
    assert a.ledger.export_jsonl() == b.ledger.export_jsonl()


def test_different_seed_differs(fast_run):
    other = run_scenario(ScenarioConfig(**FAST, seed=5))
    assert other.ledger.export_jsonl() != fast_run.ledger.export_jsonl()


def test_replay_reconstructs_metrics(fast_run):
    replayed = replay_metrics(fast_run.ledger.export_jsonl(), fast_run.config)
    assert emit_results(replayed) == emit_results(fast_run.metrics)


def test_dropout_only_aggregates_survivors():
    cfg = ScenarioConfig(**{**FAST, "rounds": 3}, dropout_prob=0.3, seed=2)
    res = run_scenario(cfg)
    led, sid = res.ledger, res.session_id
    submitted = [m.n_submitted for m in res.metrics]
    assert len(submitted) == 3 and min(submitted) < 6
    for r in (1, 2, 3):
        stored = {tx.model_id for tx in led.query("TT2", sid, r)}
        assert set(led.latest("TT5", sid, r).benign_ids) <= stored
    assert emit_results(replay_metrics(led.export_jsonl(), cfg)) == emit_results(res.metrics)


def test_unattacked_rounds_have_no_truth():
    res = run_scenario(ScenarioConfig(**FAST, poisoned_rounds=[2], seed=4, defense="none"))
    assert res.metrics[0].TPR == 1.0 and res.metrics[0].TNR == 1.0
    assert res.metrics[1].TPR == 0.0


def test_benign_run_keeps_main_accuracy():
    cfg = ScenarioConfig(seed=0, pmr=0.0, attack_mode="benign", defense="none")
    ma = [m.MA for m in run_scenario(cfg).metrics]
    assert ma[-1] >= ma[0] - 0.005


@pytest.mark.xfail(strict=True, reason="G-KDE with Silverman bandwidth splits heterogeneous "
                                       "benign scores; see notes")
def test_benign_run_flags_nobody():
    cfg = ScenarioConfig(seed=0, pmr=0.0, attack_mode="benign")
    res = run_scenario(cfg)
    assert all(tx.malicious_ids == [] for tx in res.ledger.query("TT5"))


# ---------------------------------------------------------------- reward dynamics

def test_standing_contract_reward():
    assert standing_contract_reward(100, 0, 5) == 10.0
    assert standing_contract_reward(100, 1, 3) == pytest.approx(10 * math.exp(-1 / 3))


def test_reward_trace_shape():
    trace, penalties, ledger = reward_trace(12, {3, 5, 7})
    assert len(penalties) == 3 and ledger.count("TT1") == 12
    for s in (3, 5, 7):
        assert trace[s - 1] <= trace[s - 2]
    assert all(b >= a for a, b in zip(trace[6:], trace[7:]))
    assert trace[:2] == [10.0, 10.0]
    assert penalties == pytest.approx([10 * math.exp(-k / s) for k, s in ((1, 3), (2, 5), (3, 7))],
                                      abs=1e-12)


# ---------------------------------------------------------------- command line

def test_config_file_parsing():
    got = cli.parse_config_text("rounds = 4\n# note\npmr=0.2  # inline\nf_s_range = 0.01, 0.5\n"
                                "poisoned_rounds = 1,3\nattack_mode = dba\n")
    assert got == {"rounds": 4, "pmr": 0.2, "f_s_range": [0.01, 0.5], "poisoned_rounds": [1, 3],
                   "attack_mode": "dba"}
    for bad in ("rounds 4", "colour = red", "rounds = x", "seed = 1\nseed = 2"):
        with pytest.raises(ConfigError):
            cli.parse_config_text(bad)


def test_flags_override_config(tmp_path, caplog):
    path = tmp_path / "c.cfg"
    path.write_text("rounds = 5\npmr = 0.1\n")
    args = cli.build_parser().parse_args(["run", "--config", str(path), "--rounds", "2"])
    with caplog.at_level("WARNING", logger="ledgerfl.cli"):
        cfg = cli.resolve_config(args)
    assert (cfg.rounds, cfg.pmr) == (2, 0.1)
    assert "overrides" in caplog.text


def test_cli_run_writes_outputs(tmp_path):
    cfgfile = tmp_path / "c.cfg"
    cfgfile.write_text("\n".join(f"{k} = {v}" for k, v in FAST.items() if k != "rounds"))
    out, led = tmp_path / "m.json", tmp_path / "ledger.jsonl"
    code = cli.main(["run", "--config", str(cfgfile), "--rounds", "1", "--seed", "4",
                     "--format", "json", "--out", str(out), "--ledger", str(led)])
    assert code == 0
    rows = json.loads(out.read_text())
    assert len(rows) == 1 and rows[0]["round"] == 1
    assert json.loads(led.read_text().splitlines()[0])["type"] == "TT1"


def test_cli_reports_config_errors(capsys):
    assert cli.main(["run", "--pmr", "1.5"]) != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config"
