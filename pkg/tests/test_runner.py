import json
import threading

import numpy as np
import pytest

from moe2pc.cli import _free_port
from moe2pc.model import config_by_name, gen_weights
from moe2pc.runner import (
    REPORT_SCHEMA, PeerFailure, make_report, measure_budget, run_inference, run_party_tcp, run_two_party,
)
from moe2pc.transport import CLIENT, LAN, SERVER, WAN, Tag

REPORT_KEYS = {
    "schema_version": int, "protocol": str, "bytes_online": dict, "framing_bytes": int, "messages": int,
    "rounds": int, "bytes_setup_modeled": int, "wall_time_s": float, "modeled_time_s": float,
    "modeled_time_lan_s": float, "modeled_time_wan_s": float, "net_profile": str, "per_section": dict,
    "counters": dict, "model": dict,
}


@pytest.fixture(scope="module")
def tiny():
    cfg = config_by_name("tiny-moe-2e")
    tokens = np.random.default_rng(0).uniform(-1, 1, (cfg.seq_len, cfg.d_model))
    return cfg, gen_weights(cfg, 5), tokens


class TestErrors:
    def test_root_cause_reported(self):
        def client(p):
            p.chan.recv(Tag.TEST)

        def server(p):
            raise KeyError("boom")

        with pytest.raises(KeyError):
            run_two_party(client, server, timeout=5)


class TestReport:
    def test_schema(self, tiny):
        cfg, store, tokens = tiny
        _, res = run_inference(cfg, store, tokens, seed=1)
        rep = json.loads(json.dumps(make_report(res, protocol="secmoe", cfg=cfg, profile=WAN)))
        for key, typ in REPORT_KEYS.items():
            assert isinstance(rep[key], typ), key
        assert rep["schema_version"] == REPORT_SCHEMA
        assert rep["bytes_online"]["total"] == rep["bytes_online"]["c_to_s"] + rep["bytes_online"]["s_to_c"]
        assert rep["modeled_time_wan_s"] > rep["modeled_time_lan_s"] > 0
        assert rep["modeled_time_s"] == rep["modeled_time_wan_s"]
        layers = [k for k in rep["per_section"] if "/" not in k]
        assert layers == ["layer0", "layer1"]
        assert sum(rep["per_section"][k]["bytes_c_to_s"] for k in layers) <= rep["bytes_online"]["c_to_s"]

    def test_budget_is_input_independent(self, tiny):
        cfg, *_ = tiny
        assert measure_budget(cfg) == measure_budget(cfg)


class TestTcpInvariance:
    def test_same_counters_and_output(self, tiny):
        cfg, store, tokens = tiny
        ref, ref_res = run_inference(cfg, store, tokens, seed=9, transcript=True)
        port = _free_port()
        box = {}

        def server():
            box["s"] = run_party_tcp(SERVER, ("127.0.0.1", port), cfg, store, None, seed=9, transcript=True)

        th = threading.Thread(target=server)
        th.start()
        out, res = run_party_tcp(CLIENT, ("127.0.0.1", port), cfg, None, tokens, seed=9, transcript=True)
        th.join()
        assert np.array_equal(out, ref)
        for st in (res.stats, box["s"][1].stats):
            assert st.summary() == ref_res.stats.summary()
            assert st.transcript == ref_res.stats.transcript
