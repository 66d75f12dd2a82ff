from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from ccalab.config import ExperimentConfig, load_config, parse_config, serialize_config
from ccalab.errors import ConfigurationError

FIXTURE = Path(__file__).resolve().parents[1] / "configs" / "fixture.ini"


class TestParse:
    def test_empty_align_uses_defaults(self):
        cfg = parse_config("[align]\n")
        assert (cfg.align.beta, cfg.align.batch_size, cfg.align.lr) == (0.02, 256, 1e-5)

    def test_range_error_has_line(self):
        with pytest.raises(ConfigurationError, match=r"line 3: .*dropout_prob"):
            parse_config("[align]\nbeta = 0.1\ndropout_prob = 1.5\n")

    def test_duplicate_names_both_lines(self):
        with pytest.raises(ConfigurationError, match=r"line 3: duplicate key 'seed'.*first set on line 2"):
            parse_config("[run]\nseed = 1\nseed = 2\n")

    def test_collects_every_error(self):
        text = "[run]\nseed = x\nbogus = 1\n[spec]\nfamily = gaussian\n[nowhere]\n"
        with pytest.raises(ConfigurationError) as e:
            parse_config(text)
        msg = str(e.value)
        for line in ("line 2", "line 3", "line 5", "line 6"):
            assert line in msg

    def test_enumeration_budget(self):
        with pytest.raises(ConfigurationError, match="enumeration budget"):
            parse_config("[spec]\nV = 10\nN = 8\n")

    def test_sweep_axis_needs_grid(self):
        with pytest.raises(ConfigurationError, match="empty grid"):
            parse_config("[sweep]\naxis = cfg_s, cca_lambda\ngrid_cfg_s = 0, 1\n")

    def test_shipped_fixture_parses(self):
        cfg = load_config(FIXTURE)
        assert cfg.sweep.grid_for("cfg_s") == (0.0, 0.5, 1.0, 2.0, 3.0)


class TestRoundTrip:
    def test_fixture(self):
        cfg = load_config(FIXTURE)
        assert parse_config(serialize_config(cfg)) == cfg

    @settings(max_examples=50)
    @given(st.integers(0, 2**63), st.floats(1e-6, 10.0), st.sampled_from(["cca", "dpo", "unlearn", "mle", "none"]),
           st.lists(st.floats(0.0, 1e4), min_size=1, max_size=6))
    def test_random(self, seed, beta, loss, grid):
        text = (f"[run]\nseed = {seed}\n[align]\nbeta = {beta!r}\nloss = {loss}\n"
                f"[sweep]\naxis = cca_lambda\ngrid = {', '.join(repr(g) for g in grid)}\n")
        cfg = parse_config(text)
        assert parse_config(serialize_config(cfg)) == cfg

    def test_hash_ignores_out_dir(self):
        cfg = ExperimentConfig()
        assert cfg.hash() == cfg.with_overrides(out_dir="/elsewhere").hash()
        assert cfg.hash() != cfg.with_overrides(seed=5).hash()
