import statistics
from dataclasses import replace
from pathlib import Path

import pytest

from pfl_lstr.experiments import (COLUMNS, ConfigError, DataConfig, ExperimentConfig,
                                  compare, desk_config, dump_config, export_report,
                                  load_config, published_config, read_report, render_report,
                                  report_row)
from pfl_lstr.federation import FederationConfig
from pfl_lstr.metrics import report_from_predictions

from .conftest import SMALL_MEM, SMALL_MODEL

GOLDEN = Path(__file__).parent / "golden"

TINY = ExperimentConfig(SMALL_MODEL, SMALL_MEM,
                        FederationConfig(rounds=1, decoder_epochs=1, local_epochs=2,
                                         select_fraction=0.67, encoder_lr=0.05, fedavg_lr=0.05,
                                         decoder_lr=0.05, local_lr=0.05),
                        DataConfig(sequences=9))


class TestConfig:
    def test_published_preset_values(self):
        cfg = published_config()
        fed = cfg.federation
        assert (cfg.memory.work_slots, cfg.memory.long_slots) == (12, 48)
        assert (fed.rounds, fed.decoder_epochs, fed.encoder_epochs) == (100, 5, 1)
        assert (fed.encoder_lr, fed.fedavg_lr, fed.decoder_lr) == (1e-6, 1e-7, 1e-3)
        assert (fed.select_fraction, fed.local_epochs) == (0.5, 1000)

    def test_slot_mismatch(self):
        with pytest.raises(ConfigError, match="slots"):
            ExperimentConfig(SMALL_MODEL, published_config().memory)

    def test_dump_load_round_trip(self, tmp_path):
        cfg = desk_config()
        (tmp_path / "c.ini").write_text(dump_config(cfg))
        assert load_config(tmp_path / "c.ini", published_config()) == cfg

    def test_partial_override(self, tmp_path):
        (tmp_path / "c.ini").write_text("[federation]\nrounds = 3\n[memory]\nfps = 2\n")
        cfg = load_config(tmp_path / "c.ini", desk_config())
        assert cfg.federation.rounds == 3
        assert cfg.model.work_slots == cfg.memory.work_slots == 6

    @pytest.mark.parametrize("text", ["[bogus]\nx = 1\n", "[model]\nwidth = 3\n",
                                      "[model]\nembed_dim = many\n", "[model]\nheads = 5\n",
                                      "not ini"])
    def test_bad_files(self, tmp_path, text):
        (tmp_path / "c.ini").write_text(text)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.ini")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")


class TestRender:
    def rows(self):
        a = report_from_predictions([0, 0, 1, 2], [0, 1, 1, 0], ["LK_with_SOP", "LK_with_SOP",
                                                                "LC_with_SOP", "LC_with_SOP"])
        return [report_row(a, "x", 0, 1)]

    def test_golden_csv(self):
        r1 = {"variant": "pfl-lstr", "client": 0, "seed": 1, "lk_precision": 0.5,
              "llc_precision": 1.0, "rlc_precision": None, "fp_rate": 0.25,
              "macro_precision": 0.75}
        r2 = {"variant": "fedavg", "client": 2, "seed": 1, "lk_precision": 1.0,
              "llc_precision": 0.5, "rlc_precision": 2 / 3, "fp_rate": None,
              "macro_precision": (1.0 + 0.5 + 2 / 3) / 3}
        assert render_report([r1, r2]) == (GOLDEN / "report.csv").read_text()

    def test_header_only_when_empty(self):
        assert render_report([]) == ",".join(COLUMNS) + "\n"
        assert render_report([], "jsonl") == ""

    @pytest.mark.parametrize("fmt", ["csv", "jsonl"])
    def test_round_trip(self, tmp_path, fmt):
        rows = self.rows()
        export_report(rows, tmp_path / "r", fmt)
        assert read_report(tmp_path / "r", fmt) == rows

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            render_report([], "xml")


@pytest.fixture(scope="module")
def two_seed_table():
    return compare(TINY, ["pfl-lstr", "fedavg", "local", "pfl-lstr-2cams"], [0, 1])


class TestCompare:
    def test_row_structure(self, two_seed_table):
        t = two_seed_table
        assert len(t.rows) == 4 * 3 * 2
        keys = {(r["variant"], r["client"], r["seed"]) for r in t.rows}
        assert len(keys) == len(t.rows)
        assert all(set(r) == set(COLUMNS) for r in t.all_rows())

    def test_same_split_for_every_variant(self, two_seed_table):
        for seed in (0, 1):
            fps = {v: f for (v, s), f in two_seed_table.fingerprints.items() if s == seed}
            assert len(set(fps.values())) == 1

    def test_mean_and_std(self, two_seed_table):
        t = two_seed_table
        for variant in ("pfl-lstr", "fedavg"):
            for cid in (0, 1, 2):
                vals = [t.value(variant, cid, "lk_precision", s) for s in (0, 1)]
                vals = [v for v in vals if v is not None]
                mean = t.value(variant, cid, "lk_precision")
                if vals:
                    assert min(vals) <= mean <= max(vals)
                    assert mean == statistics.fmean(vals)

    def test_single_seed_has_no_summary(self):
        t = compare(replace(TINY, federation=replace(TINY.federation, rounds=0)), ["fedavg"], [3])
        assert t.summary_rows() == [] and len(t.rows) == 3

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            compare(TINY, ["magic"], [0])

    def test_deterministic(self, two_seed_table):
        again = compare(TINY, ["pfl-lstr", "fedavg", "local", "pfl-lstr-2cams"], [0, 1])
        assert render_report(again) == render_report(two_seed_table)
