import os

from click.testing import CliRunner

from teepay.cli import main


def invoke(*args):
    return CliRunner().invoke(main, list(args))


class TestDemo:
    def test_default_steering_settles_at_nine(self):
        result = invoke("demo", "--payments", "20")
        assert result.exit_code == 0
        assert "payout_broadcast=900000000" in result.output
        assert "payout_hash=9099800000" in result.output
        assert "ledger_channel_txs 2" in result.output

    def test_steering_disabled(self):
        result = invoke("demo", "--payments", "5", "--close-b", "-1")
        assert result.exit_code == 0
        assert "settled" in result.output

    def test_zero_payments_settles_at_initial(self):
        result = invoke("demo", "--payments", "0", "--fee", "0")
        assert result.exit_code == 0
        assert "payout_hash=5000000000 payout_broadcast=5000000000" in result.output

    def test_unreachable_target_fails_cleanly(self):
        result = invoke("demo", "--payments", "1", "--close-b", "1000")
        assert result.exit_code == 1


class TestScenario:
    def test_list(self):
        result = invoke("scenario", "list")
        assert result.exit_code == 0
        assert "honest" in result.output and "maul" in result.output

    def test_builtin_runs(self):
        result = invoke("scenario", "replay", "--seed", "3")
        assert result.exit_code == 0
        assert result.output.startswith("scenario replay-3")
        assert "channel_txs=2" in result.output

    def test_unknown_name_is_usage_error(self):
        result = invoke("scenario", "does-not-exist")
        assert result.exit_code == 2

    def test_scenario_file_runs(self, tmp_path):
        path = tmp_path / "two.scenario"
        path.write_text("seed 4\npay B 777\ndeliver 0\ntick 1\nterminate A\n")
        result = invoke("scenario", str(path))
        assert result.exit_code == 0
        assert "pay BroadcastSide 777" in result.output

    def test_malformed_file_reports_line_and_exits_2(self, tmp_path):
        path = tmp_path / "bad.scenario"
        path.write_text("seed 4\nfrobnicate A\n")
        result = invoke("scenario", str(path))
        assert result.exit_code == 2
        assert "bad.scenario:2" in result.stderr


class TestSoak:
    def test_small_soak_with_report(self, tmp_path):
        out = tmp_path / "reports"
        result = invoke("soak", "--count", "9", "--out-dir", str(out))
        assert result.exit_code == 0
        assert "scenarios=9 violations=0" in result.output
        assert (out / "soak_results.csv").exists()
        assert (out / "soak_summary.png").exists()
        csv_text = (out / "soak_results.csv").read_text()
        assert csv_text.count("\n") == 10  # header + 9 rows


class TestBench:
    def test_bench_with_report(self, tmp_path):
        out = tmp_path / "bench"
        result = invoke("bench", "-n", "50", "--out-dir", str(out))
        assert result.exit_code == 0
        assert "n_payments_each_way=50" in result.output
        for name in ("bench_report.txt", "bench_latency.csv", "bench_latency.png"):
            assert (out / name).exists(), name
        assert os.path.getsize(out / "bench_latency.png") > 0

    def test_bad_mode_is_usage_error(self):
        result = invoke("bench", "--mode", "warp")
        assert result.exit_code == 2


class TestNode:
    def test_party_requires_role_and_ledger(self):
        result = invoke("node", "--listen", "127.0.0.1:1")
        assert result.exit_code == 2
