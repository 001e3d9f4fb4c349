from __future__ import annotations

import json

import jsonschema
import numpy as np
import pytest

from diffprof.config import ToolkitConfig, load_config
from diffprof.errors import InputMissing, SpecInvalid
from diffprof.localize import ExpectedRange, LocalizeConfig, PatternTable, localize, localize_function
from diffprof.report import (
    REPORT_SCHEMA,
    describe,
    display_key,
    distributions_csv,
    report_document,
    to_json,
    to_text,
)
from diffprof.trace import Channel, CommScope, FunctionId, Kind


def test_defaults():
    c = ToolkitConfig()
    assert (c.window_seconds, c.sample_rate_hz, c.beta_gate, c.delta, c.k) == (20, 10_000, 0.01, 0.4, 5)
    assert (c.learn_repeats, c.detector_window, c.relearn_after) == (10, 50, 200)
    assert c.slowdown_percent == 5 and c.blocked_multiplier == 5 and c.lead_iterations == 3
    d = c.detector_config()
    assert d.slowdown_fraction == pytest.approx(0.05) and d.cooldown_ns == 600 * 10**9
    assert c.range_policy().for_function(FunctionId(Kind.PYTHON, "f")).beta == (0, 0.01)


def test_precedence(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"delta": 0.3, "k": 4, "max_peers": 50}))
    env = {"DIFFPROF_K": "3", "DIFFPROF_MAX_PEERS": "20"}
    c = load_config(p, {"max_peers": 10, "delta": None}, env)
    assert (c.delta, c.k, c.max_peers) == (0.3, 3.0, 10)
    assert load_config(None, None, {}).to_dict() == ToolkitConfig().to_dict()


def test_config_errors(tmp_path):
    with pytest.raises(InputMissing):
        load_config(tmp_path / "missing.json", environ={})
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": 1}))
    with pytest.raises(SpecInvalid):
        load_config(bad, environ={})
    with pytest.raises(SpecInvalid):
        load_config(None, {"delta": -1.0}, {})
    with pytest.raises(SpecInvalid):
        ToolkitConfig(range_overrides={"py": [[0.5, 0.1], [0, 1], [0, 1]]}).range_policy()


NIC = FunctionId(Kind.COLLECTIVE, "ncclAllReduce_RING", (), CommScope.INTER)
PY = FunctionId(Kind.PYTHON, "recv_into", ("a.py:x", "b.py:y", "c.py:z", "d.py:w"))


@pytest.fixture()
def doc():
    rng = np.random.default_rng(0)
    table = PatternTable(range(40))
    nic = np.column_stack([np.full(40, 0.2), rng.uniform(0.48, 0.52, 40), rng.uniform(0.09, 0.11, 40)])
    nic[5] = (0.2, 0.25, 0.005)
    table.set_function(NIC, nic, channel=Channel.NIC)
    py = np.column_stack([np.full(40, 0.005), np.full(40, 0.3), np.full(40, 0.05)])
    py[9, 0] = 0.08
    table.set_function(PY, py, channel=Channel.CPU)
    report = localize(table, config=LocalizeConfig(seed=2))
    return report_document(report, config=ToolkitConfig().to_dict(), extra={"note": 1})


def test_document_schema_and_content(doc):
    jsonschema.validate(doc, REPORT_SCHEMA)
    found = [(f["rank"], f["function"]["name"], f["reason"]) for f in doc["findings"]]
    assert found == [(9, "recv_into", "Both"), (5, "ncclAllReduce_RING", "PeerOutlier")]
    assert doc["findings"][1]["description"].endswith("candidate slow link")
    assert doc["findings"][0]["function"]["stack"] == ["b.py:y", "c.py:z", "d.py:w"]
    assert set(doc["distributions"]) == {display_key(NIC), display_key(PY)}
    assert json.loads(to_json(doc)) == doc


def test_text_and_csv(doc):
    text = to_text(doc)
    assert "2 abnormal" in text and "rank 9" in text and "candidate slow link" in text
    rows = distributions_csv(doc).splitlines()
    assert rows[0].startswith("function,workers,gated,abnormal")
    assert len(rows) == 3


def _peer_verdict(f, healthy, odd, ch, expected=None):
    x = np.tile(np.asarray(healthy, dtype=float), (30, 1))
    x[4] = odd
    fr = localize_function(f, np.arange(30), x, expected or ExpectedRange(), channel=ch)
    return describe(fr.verdict(4), fr)


def test_describe_signatures():
    gpu = FunctionId(Kind.GPU_KERNEL, "gemm")
    intra = FunctionId(Kind.COLLECTIVE, "ag", (), CommScope.INTRA)
    assert "throttling" in _peer_verdict(gpu, (0.3, 0.9, 0.01), (0.5, 0.5, 0.01), Channel.SM_FREQ)
    assert "NVLink down" in _peer_verdict(intra, (0.02, 0.7, 0.02), (0.05, 0.0, 0.0), Channel.NVLINK)
    assert "rerouted" in _peer_verdict(NIC, (0.2, 0.5, 0.01), (0.2, 0.95, 0.01), Channel.NIC)
    assert "alternates" in _peer_verdict(NIC, (0.2, 0.5, 0.01), (0.2, 0.25, 0.25), Channel.NIC)
    assert "host-side stall" in _peer_verdict(PY, (0.005, 0.3, 0.01), (0.05, 0.3, 0.01), Channel.CPU,
                                              ExpectedRange(beta=(0, 0.01)))
