import json

import numpy as np
import pandas as pd
import pytest

from mcglm_wald import cli
from mcglm_wald.errors import ConfigError, DataError


def write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture
def gaussian_files(tmp_path):
    rng = np.random.default_rng(5)
    n = 120
    x = rng.normal(size=n)
    group = np.array(["A", "B", "C"])[np.arange(n) % 3]
    y = 1.0 + 0.5 * x + (group == "B") * 0.7 + rng.normal(size=n)
    frame = pd.DataFrame({"y": y, "y2": 2.0 - x + rng.normal(size=n), "x": x, "g": group,
                          "id": np.repeat(np.arange(n // 3), 3)})
    data = tmp_path / "data.csv"
    frame.to_csv(data, index=False)
    config = {"responses": [{"column": "y"}, {"column": "y2"}], "formula": "x + g",
              "factors": {"g": ["A", "B", "C"]}}
    cfg = write(tmp_path / "model.json", json.dumps(config))
    return frame, str(data), cfg, tmp_path


class TestIngest:
    def _config(self, **kw):
        return cli.ModelConfig.from_dict({"responses": ["yfas"], "formula": "group", **kw})

    def test_single_missing_row(self, tmp_path):
        path = write(tmp_path / "d.csv", "yfas,group\n1,a\n2,b\nNA,a\n4,b\n5,a\n6,\n7,b\n")
        ds = cli.ingest_csv(path, self._config())
        assert len(ds.frame) == 5 and ds.dropped == 2
        assert ds.source_lines.tolist() == [2, 3, 5, 6, 8]

    def test_six_row_toy(self, tmp_path):
        path = write(tmp_path / "d.csv", "yfas,group\n1,a\n2,b\nNA,a\n4,b\n5,a\n6,b\n")
        assert len(cli.ingest_csv(path, self._config()).frame) == 5

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError):
            cli.ingest_csv(write(tmp_path / "d.csv", ""), self._config())

    def test_parse_error_names_line(self, tmp_path):
        path = write(tmp_path / "d.csv", "yfas,group\n1,a\n2,b,extra\n")
        with pytest.raises(DataError, match="line 3"):
            cli.ingest_csv(path, self._config())

    def test_non_numeric_response_names_line(self, tmp_path):
        path = write(tmp_path / "d.csv", "yfas,group\n1,a\nhigh,b\n")
        with pytest.raises(DataError, match="line 3"):
            cli.ingest_csv(path, self._config())

    def test_unknown_column(self, tmp_path):
        path = write(tmp_path / "d.csv", "yfas,group\n1,a\n")
        with pytest.raises(ConfigError):
            cli.ingest_csv(path, self._config(group_column="subject"))

    def test_group_block_matches_worked_example(self):
        frame = pd.DataFrame({"id": ["A", "A", "A", "B", "B", "C"]})
        Z = cli.build_group_block_z(frame, "id").toarray()
        expected = np.array([[1, 1, 1, 0, 0, 0], [1, 1, 1, 0, 0, 0], [1, 1, 1, 0, 0, 0],
                             [0, 0, 0, 1, 1, 0], [0, 0, 0, 1, 1, 0], [0, 0, 0, 0, 0, 1]])
        np.testing.assert_array_equal(Z, expected)

    def test_group_block_unsorted(self):
        frame = pd.DataFrame({"id": [2, 1, 2, 3, 1]})
        Z = cli.build_group_block_z(frame, "id").toarray()
        ids = frame.id.to_numpy()
        np.testing.assert_array_equal(Z, (ids[:, None] == ids[None, :]).astype(float))

    def test_bad_config_key(self):
        with pytest.raises(ConfigError):
            cli.ModelConfig.from_dict({"responses": ["y"], "formla": "x"})


class TestCommands:
    def test_fit_matches_ols(self, gaussian_files, capsys):
        frame, data, cfg, tmp = gaussian_files
        out = tmp / "fit"
        resid = tmp / "resid.csv"
        code = cli.main(["fit", "--config", cfg, "--data", data, "--out", str(out), "--residuals", str(resid)])
        assert code == 0
        table = pd.read_csv(f"{out}.csv")
        X = np.column_stack([np.ones(len(frame)), frame.x, frame.g == "B", frame.g == "C"]).astype(float)
        b = np.linalg.lstsq(X, frame.y, rcond=None)[0]
        np.testing.assert_allclose(table.estimate[:4], b, atol=1e-6)
        np.testing.assert_allclose(table.lower, table.estimate - 1.959963984540054 * table.std_error, rtol=1e-12)
        stdout = capsys.readouterr().out
        assert "y:g[B]" in stdout and "Lower 95%" in stdout
        r = pd.read_csv(resid)
        assert list(r.columns) == ["line", "y_fitted", "y_pearson", "y2_fitted", "y2_pearson"]
        assert len(r) == len(frame)

    def test_anova_type2_equals_type3(self, gaussian_files, capsys):
        _, data, cfg, tmp = gaussian_files
        assert cli.main(["anova", "--config", cfg, "--data", data, "--type", "2", "--out", str(tmp / "a2")]) == 0
        out2 = capsys.readouterr().out
        assert cli.main(["anova", "--config", cfg, "--data", data, "--type", "3", "--out", str(tmp / "a3")]) == 0
        out3 = capsys.readouterr().out
        assert out2.replace("type II", "type III") == out3
        assert (tmp / "a2.csv").read_text() == (tmp / "a3.csv").read_text()

    def test_manova_and_dispersion(self, gaussian_files, capsys):
        _, data, cfg, tmp = gaussian_files
        assert cli.main(["manova", "--config", cfg, "--data", data, "--type", "1"]) == 0
        assert "MANOVA (type I)" in capsys.readouterr().out
        assert cli.main(["manova", "--config", cfg, "--data", data, "--dispersion"]) == 0
        assert "tau0" in capsys.readouterr().out

    def test_machine_output_full_precision(self, gaussian_files, capsys):
        _, data, cfg, tmp = gaussian_files
        cli.main(["manova", "--config", cfg, "--data", data, "--out", str(tmp / "m")])
        doc = json.loads((tmp / "m.json").read_text())
        human = capsys.readouterr().out
        p = doc["rows"][0]["p_value"]
        assert p < 0.01 and "<0.01" in human
        assert repr(p) in (tmp / "m.csv").read_text()

    def test_multcomp(self, gaussian_files, capsys):
        _, data, cfg, tmp = gaussian_files
        code = cli.main(["multcomp", "--config", cfg, "--data", data, "--effect", "g", "--select", "A-*"])
        assert code == 0
        out = capsys.readouterr().out
        assert "A-B" in out and "A-C" in out and "B-C" not in out

    def test_wald_file(self, gaussian_files, capsys):
        _, data, cfg, tmp = gaussian_files
        hyp = write(tmp / "h.json", json.dumps({"equal_zero": ["y:x", "y2:x"]}))
        out = tmp / "w"
        assert cli.main(["wald", "--config", cfg, "--data", data, "--hypothesis", hyp, "--out", str(out)]) == 0
        assert pd.read_csv(f"{out}.csv").df[0] == 2

    def test_wald_matrix_file(self, gaussian_files):
        _, data, cfg, tmp = gaussian_files
        hyp = write(tmp / "h.json", json.dumps({"parameters": ["y:x", "y2:x"], "L": [[1, 1]], "c": [-0.5]}))
        assert cli.main(["wald", "--config", cfg, "--data", data, "--hypothesis", hyp]) == 0

    def test_simulate(self, tmp_path, capsys):
        study = write(tmp_path / "s.json", json.dumps({"sample_sizes": [50], "replicates": 4}))
        out = tmp_path / "curve.csv"
        assert cli.main(["--seed", "3", "simulate", "--study", study, "--out", str(out)]) == 0
        first = out.read_text()
        assert cli.main(["--seed", "3", "simulate", "--study", study, "--out", str(out)]) == 0
        assert out.read_text() == first
        assert "seed 3" in capsys.readouterr().out

    def test_default_seed_documented(self):
        assert str(cli.DEFAULT_SEED) in cli.build_parser().format_help()


class TestExitCodes:
    def test_config_error(self, gaussian_files, capsys):
        _, data, _, tmp = gaussian_files
        bad = write(tmp / "bad.json", "{not json")
        assert cli.main(["fit", "--config", bad, "--data", data]) == 2
        assert capsys.readouterr().err.startswith("error: config_error:")

    def test_unknown_term(self, gaussian_files, capsys):
        _, data, cfg, _ = gaussian_files
        assert cli.main(["multcomp", "--config", cfg, "--data", data, "--effect", "x"]) == 2
        assert "term_error" in capsys.readouterr().err

    def test_data_error(self, gaussian_files, capsys):
        _, _, cfg, tmp = gaussian_files
        empty = write(tmp / "empty.csv", "")
        assert cli.main(["fit", "--config", cfg, "--data", empty]) == 3
        assert "data_error" in capsys.readouterr().err

    def test_numerical_error(self, tmp_path, capsys):
        data = write(tmp_path / "d.csv", "y,x\n1,1\n2,2\n3,3\n4,4\n")
        cfg = write(tmp_path / "m.json", json.dumps({"responses": ["y"], "formula": "x + z",
                                                       "factors": {}}))
        assert cli.main(["fit", "--config", cfg, "--data", data]) == 2
        data2 = write(tmp_path / "d2.csv", "y,x,z\n1,1,2\n2,2,4\n3,3,6\n4,4,8\n")
        assert cli.main(["fit", "--config", cfg, "--data", data2]) == 4
        assert "singular" in capsys.readouterr().err

    def test_non_convergence(self, gaussian_files):
        frame, data, _, tmp = gaussian_files
        cfg = write(tmp / "m.json", json.dumps({"responses": [{"column": "y", "link": "log", "variance": "power",
                                                                "power": 1}],
                                                 "formula": "x", "options": {"max_iter": 1}}))
        pos = tmp / "pos.csv"
        frame.assign(y=np.abs(frame.y) + 0.1).to_csv(pos, index=False)
        assert cli.main(["fit", "--config", cfg, "--data", str(pos)]) == 5
