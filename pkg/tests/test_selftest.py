from moe2pc.selftest import comparison_grid, dealer_tamper_detected, run_suites, truncation_grid


class TestSuites:
    def test_grids(self):
        assert comparison_grid(10)[1] == 0
        assert truncation_grid(10)[1] == 0

    def test_tamper_suite_detects(self):
        checked, missed, _ = dealer_tamper_detected()
        assert checked == 3 and missed == 0

    def test_full_level_has_12_bit_grid(self):
        lines = []
        checks = run_suites("full", report=lines.append)
        assert any("comparison exhaustive 12-bit" in c.name for c in checks)
        assert all(c.ok for c in checks), lines
