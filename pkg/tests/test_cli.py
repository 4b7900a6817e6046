import json
import subprocess
import sys

import numpy as np
import pytest

from moe2pc.cli import EXIT_FAILURE, EXIT_IO, EXIT_USAGE, _free_port, main, read_tokens

CLI = [sys.executable, "-m", "moe2pc.cli"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-weights", "--config", "tiny-moe-4e", "--seed", "1", "--out", str(d / "w")]) == 0
    rows = np.random.default_rng(0).uniform(-1, 1, (8, 16))
    (d / "in.txt").write_text("# tokens\n" + "\n".join(" ".join(f"{v:.5f}" for v in r) for r in rows) + "\n")
    return d


def infer(workdir, tag, *extra):
    out, rep = workdir / f"{tag}.out", workdir / f"{tag}.json"
    code = main(["infer", "--weights", str(workdir / "w"), "--input", str(workdir / "in.txt"),
                 "--output", str(out), "--report", str(rep), *extra])
    assert code == 0
    return np.loadtxt(out), json.loads(rep.read_text())


class TestGenWeights:
    def test_manifest_and_rerun(self, workdir, tmp_path):
        man = (workdir / "w" / "manifest.txt").read_text()
        assert "d_model=16" in man and "n_experts=4" in man
        assert main(["gen-weights", "--config", "tiny-moe-4e", "--seed", "1", "--out", str(tmp_path)]) == 0
        for f in (workdir / "w").iterdir():
            assert (tmp_path / f.name).read_bytes() == f.read_bytes()

    def test_bad_config(self, tmp_path):
        assert main(["gen-weights", "--config", "nope", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_usage_errors(self):
        assert main([]) == EXIT_USAGE
        assert main(["infer"]) == EXIT_USAGE


class TestInfer:
    def test_secmoe_vs_dense(self, workdir):
        a, ra = infer(workdir, "sec", "--protocol", "secmoe", "--gate-scaling")
        b, rb = infer(workdir, "dense", "--protocol", "dense", "--gate-scaling")
        assert a.shape == (8, 16)
        assert np.abs(a - b).max() <= 2 * 2.0 ** -18
        assert ra["bytes_online"]["total"] != rb["bytes_online"]["total"]

    def test_net_profiles(self, workdir, monkeypatch):
        _, lan = infer(workdir, "lan", "--net", "lan")
        _, wan = infer(workdir, "wan", "--net", "wan")
        assert wan["modeled_time_s"] > lan["modeled_time_s"] > 0
        monkeypatch.setenv("MOE2PC_NET", "wan")
        _, env = infer(workdir, "env")
        assert env["net_profile"] == "wan"

    def test_report_fields(self, workdir):
        _, rep = infer(workdir, "fields")
        for key in ("bytes_online", "bytes_setup_modeled", "rounds", "wall_time_s", "modeled_time_s",
                    "per_section"):
            assert key in rep
        assert {"c_to_s", "s_to_c", "total"} <= rep["bytes_online"].keys()

    def test_bad_input(self, workdir, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("1 2 3\n")
        assert main(["infer", "--weights", str(workdir / "w"), "--input", str(bad)]) == EXIT_USAGE
        assert main(["infer", "--weights", str(tmp_path / "missing"), "--input", str(bad)]) == EXIT_IO
        assert main(["infer", "--weights", str(workdir / "w")]) == EXIT_USAGE
        assert main(["infer", "--weights", str(workdir / "w"), "--input", str(workdir / "in.txt"),
                     "--role", "client"]) == EXIT_USAGE

    def test_two_processes_over_tcp(self, workdir):
        _, ref = infer(workdir, "ref", "--seed", "3")
        ref_out = np.loadtxt(workdir / "ref.out")
        addr = f"127.0.0.1:{_free_port()}"
        common = ["infer", "--weights", str(workdir / "w"), "--transport", "tcp", "--addr", addr, "--seed", "3"]
        srv = subprocess.Popen(CLI + common + ["--role", "server", "--report", str(workdir / "srv.json")])
        cli = subprocess.run(CLI + common + ["--role", "client", "--input", str(workdir / "in.txt"),
                                             "--output", str(workdir / "tcp.out"),
                                             "--report", str(workdir / "cli.json")], timeout=300)
        assert srv.wait(timeout=300) == 0 and cli.returncode == 0
        assert np.array_equal(np.loadtxt(workdir / "tcp.out"), ref_out)
        for side in ("srv", "cli"):
            rep = json.loads((workdir / f"{side}.json").read_text())
            assert rep["bytes_online"] == ref["bytes_online"]
            assert rep["rounds"] == ref["rounds"]
            assert rep["per_section"] == ref["per_section"]

    def test_connection_refused(self, workdir):
        code = main(["infer", "--weights", str(workdir / "w"), "--input", str(workdir / "in.txt"),
                     "--transport", "tcp", "--role", "client", "--addr", f"127.0.0.1:{_free_port()}",
                     "--timeout", "0.5"])
        assert code == EXIT_FAILURE


class TestBenchSelftest:
    def test_bench_schema(self, tmp_path):
        out = tmp_path / "b.json"
        assert main(["bench", "--experts", "2,4", "--protocol", "both", "--d-model", "16", "--d-ff", "32",
                     "--tokens", "2", "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["schema_version"] == 1
        assert sorted((r["n_experts"], r["protocol"]) for r in rep["rows"]) == [
            (2, "dense"), (2, "secmoe"), (4, "dense"), (4, "secmoe")]
        for r in rep["rows"]:
            assert {"online_bytes", "rounds", "wall_time_s", "modeled_lan_time_s", "modeled_wan_time_s"} <= r.keys()
        assert set(rep["flatness"]) == {"secmoe", "dense"}

    def test_bench_bad_list(self):
        assert main(["bench", "--experts", "a,b"]) == EXIT_USAGE

    def test_selftest_quick(self, capsys):
        assert main(["selftest", "--level", "quick"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "suites passed" in out


def test_read_tokens(tmp_path):
    f = tmp_path / "t.txt"
    f.write_text("1 2\n\n# c\n3 4  # trailing\n")
    assert read_tokens(f).tolist() == [[1, 2], [3, 4]]
