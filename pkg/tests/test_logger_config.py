import json
import logging

import pytest

from src.attention.config import AttnConfig
from src.config.run_config import load_run_config
from src.utils.errors import AsaBladeError, NumericalDivergenceError, ValidationError
from src.utils.logger import ContextFormatter, format_context, get_logger, set_level
from src.utils.report import format_duration, format_value


class TestLogger:
    def test_shared_instance(self):
        assert get_logger("asablade.test") is get_logger("asablade.test")

    def test_invalid_level(self):
        with pytest.raises(ValueError):
            set_level("chatty")

    def test_format_context(self):
        assert format_context({"n": 4, "mode": "3d"}) == "n=4, mode=3d"
        assert format_context(None) == ""

    def test_context_prefix(self):
        record = logging.LogRecord("x", logging.INFO, __file__, 1, "hello", None, None)
        record.custom_context = "seed=3"
        assert ContextFormatter("%(message)s").format(record) == "[seed=3] hello"
        assert record.msg == "hello"

    def test_persistent_context_merges(self, caplog):
        log = get_logger("contexttest")
        log.logger.propagate = True
        try:
            log.add_custom_context({"command": "probe"})
            with caplog.at_level(logging.INFO, logger="contexttest"):
                log.info("running", context={"seed": 1})
            assert caplog.records[-1].custom_context == "command=probe, seed=1"
        finally:
            log.clear_custom_context()
            log.logger.propagate = False


class TestRunConfig:
    def test_none(self):
        assert load_run_config(None) == {}

    def test_missing(self, tmp_path):
        with pytest.raises(ValidationError):
            load_run_config(str(tmp_path / "absent.json"))

    def test_not_an_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ValidationError):
            load_run_config(str(path))

    def test_nested_rejected(self, tmp_path):
        path = tmp_path / "nested.json"
        path.write_text(json.dumps({"attn": {"tau": 0.5}}))
        with pytest.raises(ValidationError):
            load_run_config(str(path))

    def test_grid_allowed(self, tmp_path):
        path = tmp_path / "ok.json"
        path.write_text(json.dumps({"grid": [1, 2, 3], "tau": 0.5}))
        assert load_run_config(str(path))["tau"] == 0.5


class TestAttnConfig:
    def test_aliases(self):
        cfg = AttnConfig.from_dict({"b": 32, "k": 8, "unrelated": 1})
        assert (cfg.block_size, cfg.samples) == (32, 8)

    @pytest.mark.parametrize("kwargs", [
        {"block_size": 0},
        {"block_size": 8, "samples": 9},
        {"block_size": 8, "samples": 4, "tau": 0.0},
        {"block_size": 8, "samples": 4, "min_keep": 0.6, "max_keep": 0.5},
        {"block_size": 8, "samples": 4, "pool_n": -1},
        {"block_size": 8, "samples": 4, "scale": 0.0},
        {"block_size": 8, "samples": 4, "sampling": "random"},
        {"block_size": 8, "samples": 4, "gilbert_mode": "4d"},
        {"block_size": 8, "samples": 4, "target_sparsity": 1.0},
        {"block_size": 8, "samples": 4, "global_bias": "no"},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ValidationError):
            AttnConfig(**kwargs)

    def test_default_scale(self):
        assert AttnConfig(block_size=8, samples=4).resolve_scale(16) == 0.25

    def test_overrides_skip_none(self):
        cfg = AttnConfig(block_size=8, samples=4, tau=0.7)
        assert cfg.with_overrides(tau=None, pool_n=2) == AttnConfig(block_size=8, samples=4, tau=0.7, pool_n=2)


class TestErrors:
    def test_hierarchy(self):
        assert issubclass(ValidationError, ValueError) and issubclass(ValidationError, AsaBladeError)
        assert issubclass(NumericalDivergenceError, ArithmeticError)
        assert NumericalDivergenceError("x").trace == []


class TestReport:
    def test_format_value(self):
        assert format_value(float("inf")) == "inf"
        assert format_value(1e-5) == "1.0000e-05"
        assert format_value(None) == "None"

    def test_format_duration(self):
        assert format_duration(75.5) == "1m 15.50s"
