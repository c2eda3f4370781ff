import logging

import pytest

from evtail.common.decorators import log_elapsed
from evtail.common.exceptions import ConfigException, DataFormatException
from evtail.common.logger import logger, set_log_level
from evtail.util.seeds import stage_seed
from evtail.util.serialize import dumps, read_checkpoint, read_json, write_checkpoint, write_json


class TestSerialize:
    def test_key_order_is_stable(self):
        assert dumps({"b": 1, "a": [1.5, None]}) == dumps({"a": [1.5, None], "b": 1})

    def test_json_round_trip(self, tmp_path):
        data = {"shape": 0.1 + 0.2, "scale": 1e-6, "regime": None}
        write_json(tmp_path / "nested" / "r.json", data)
        assert read_json(tmp_path / "nested" / "r.json") == data

    def test_malformed_json_reports_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "seed": ,\n}')
        with pytest.raises(ConfigException, match="line 2"):
            read_json(path)

    def test_checkpoint_kind(self, tmp_path):
        path = tmp_path / "ckpt.json"
        write_checkpoint(path, "estimator", {"x": 1})
        assert read_checkpoint(path, "estimator") == {"x": 1}
        with pytest.raises(DataFormatException):
            read_checkpoint(path, "augmentor")

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "plain.json"
        write_json(path, {"x": 1})
        with pytest.raises(DataFormatException):
            read_checkpoint(path, "estimator")


class TestStageSeed:
    def test_deterministic_and_distinct(self):
        assert stage_seed(7, "threshold") == stage_seed(7, "threshold")
        assert stage_seed(7, "threshold") != stage_seed(7, "adversarial")
        assert stage_seed(7, "threshold") != stage_seed(8, "threshold")


class TestLogElapsed:
    def test_logs_completion(self, caplog):
        @log_elapsed("demo")
        def work(x):
            return x * 2

        with caplog.at_level(logging.INFO, logger="evtail"):
            assert work(3) == 6
        assert any("demo finished" in r.message for r in caplog.records)

    def test_logs_abort_and_reraises(self, caplog):
        @log_elapsed()
        def broken():
            raise ValueError("boom")

        with caplog.at_level(logging.INFO, logger="evtail"):
            with pytest.raises(ValueError):
                broken()
        assert any("broken aborted" in r.message for r in caplog.records)


class TestLogLevel:
    def test_set_by_name(self):
        original = logger.level
        try:
            set_log_level("debug")
            assert logger.level == logging.DEBUG
        finally:
            logger.setLevel(original)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            set_log_level("VERBOSE")
