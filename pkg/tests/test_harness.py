import csv
import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from sbac.errors import ConfigError, DataError
from sbac.harness import (ALPHA_GRID, MetricsWriter, RunConfig, RunLock, emit_plot,
                          normalized_score, stability_metrics)


class TestRunConfig:
    def test_roundtrip_lossless(self, tmp_path):
        cfg = RunConfig(env="chain", gamma=0.97, lr_actor=3.3e-4, alpha=2.0,
                        seed=17, q_hidden="64,64", dataset="/tmp/x.jsonl")
        path = tmp_path / "c.cfg"
        cfg.save(str(path))
        back = RunConfig.load(str(path))
        assert back == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("learning_rate = 0.1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("gamma = fast\n")

    def test_comments_and_blanks_ignored(self):
        cfg = RunConfig.from_text("# a comment\n\nseed = 5  # trailing\n")
        assert cfg.seed == 5

    def test_invalid_mode_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(mode="ablation3")

    def test_nonpositive_rate_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(lr_actor=0.0)

    def test_overrides(self):
        cfg = RunConfig().with_overrides(["alpha=2.0", "mode=ablation1"])
        assert cfg.alpha == 2.0 and cfg.mode == "ablation1"
        with pytest.raises(ConfigError):
            RunConfig().with_overrides(["nope=1"])

    def test_alpha_grid_preserved(self):
        assert ALPHA_GRID == (0.2, 0.5, 2.0, 5.0)

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            RunConfig.load("/nonexistent/path.cfg")


class TestMetricsWriter:
    def test_fixed_columns_and_blanks(self, tmp_path):
        path = tmp_path / "m.csv"
        w = MetricsWriter(str(path))
        w.write(step=0, bc_loss=1.5, fqe_loss=0.25)
        w.write(step=1, policy_loss=-2.0, eval_return_mean=3.0, eval_return_min=1.0)
        w.close()
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["bc_loss"] == "1.5" and rows[0]["policy_loss"] == ""
        assert rows[1]["eval_return_min"] == "1.0"

    def test_unknown_field_rejected(self):
        w = MetricsWriter(None)
        with pytest.raises(ValueError):
            w.write(step=0, surprise=1.0)


class TestStability:
    def test_all_equal_returns_zero(self):
        rep = stability_metrics([{"step": 0, "returns": [5.0, 5.0, 5.0]}])
        assert rep.worst_episode_pct == 0.0 and rep.worst_eval_pct == 0.0

    def test_worst_episode_arithmetic(self):
        returns = [10.0] * 9 + [5.0]
        rep = stability_metrics([{"step": 0, "returns": returns}])
        assert abs(rep.worst_episode_pct - 100.0 * (9.5 - 5.0) / 9.5) < 1e-12

    def test_worst_eval_over_window(self):
        log = [{"step": i, "returns": [10.0, 10.0]} for i in range(12)]
        log[-3]["returns"] = [4.0, 4.0]
        rep = stability_metrics(log)
        assert rep.evals_used == 10 and not rep.truncated
        assert abs(rep.worst_eval_pct - 100.0 * (9.4 - 4.0) / 9.4) < 1e-12

    def test_truncated_window_flagged(self):
        rep = stability_metrics([{"step": 0, "returns": [1.0]}, {"step": 1, "returns": [2.0]}])
        assert rep.truncated and rep.evals_used == 2

    def test_empty_log_rejected(self):
        with pytest.raises(DataError):
            stability_metrics([])


class TestNormalizedScore:
    def test_anchors(self):
        assert normalized_score(0.0, 0.0, 100.0) == 0.0
        assert normalized_score(100.0, 0.0, 100.0) == 100.0
        assert normalized_score(50.0, 0.0, 100.0) == 50.0

    def test_super_expert_unclamped(self):
        assert normalized_score(120.0, 0.0, 100.0) == 120.0

    def test_equal_references_rejected(self):
        with pytest.raises(ValueError):
            normalized_score(1.0, 5.0, 5.0)


def write_csv(path, rows, fields=("step", "policy_loss")):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(fields) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


class TestEmitPlot:
    def test_single_seed_polyline_vertices(self, tmp_path):
        csv_path = tmp_path / "m.csv"
        write_csv(str(csv_path), [(i, np.sin(i / 3.0)) for i in range(17)])
        out = tmp_path / "p.svg"
        emit_plot([str(csv_path)], ["policy_loss"], str(out))
        root = ET.parse(str(out)).getroot()
        ns = {"svg": "http://www.w3.org/2000/svg"}
        lines = root.findall(".//svg:polyline", ns)
        assert len(lines) == 1
        assert len(lines[0].attrib["points"].split()) == 17
        assert not root.findall(".//svg:polygon", ns)  # no band for one seed

    def test_multi_seed_band(self, tmp_path):
        paths = []
        rng = np.random.default_rng(0)
        for s in range(5):
            p = tmp_path / f"m{s}.csv"
            write_csv(str(p), [(i, float(i + rng.normal())) for i in range(10)])
            paths.append(str(p))
        out = tmp_path / "p.svg"
        emit_plot(paths, ["policy_loss"], str(out))
        root = ET.parse(str(out)).getroot()
        ns = {"svg": "http://www.w3.org/2000/svg"}
        band = root.findall(".//svg:polygon", ns)
        assert len(band) == 1
        assert len(band[0].attrib["points"].split()) == 20  # up along hi, back along lo

    def test_constant_metric_flat_band(self, tmp_path):
        paths = []
        for s in range(3):
            p = tmp_path / f"c{s}.csv"
            write_csv(str(p), [(i, 2.5) for i in range(8)])
            paths.append(str(p))
        out = tmp_path / "p.svg"
        emit_plot(paths, ["policy_loss"], str(out))
        root = ET.parse(str(out)).getroot()
        ns = {"svg": "http://www.w3.org/2000/svg"}
        line = root.findall(".//svg:polyline", ns)[0]
        ys = {pt.split(",")[1] for pt in line.attrib["points"].split()}
        assert len(ys) == 1  # horizontal line
        band = root.findall(".//svg:polygon", ns)[0]
        band_ys = {pt.split(",")[1] for pt in band.attrib["points"].split()}
        assert band_ys == ys  # zero-height band collapses onto the line

    def test_missing_field_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        write_csv(str(p), [(0, 1.0)])
        with pytest.raises(DataError):
            emit_plot([str(p)], ["mmd_loss"], str(tmp_path / "x.svg"))


class TestRunLock:
    def test_lock_excludes_second_owner(self, tmp_path):
        d = str(tmp_path)
        with RunLock(d):
            with pytest.raises(DataError):
                with RunLock(d):
                    pass
        with RunLock(d):  # released after exit
            pass
