import json

import numpy as np
import pytest

from ehmfm.cli import ingest, main, write_panel_csv
from ehmfm.errors import ValidationError
from ehmfm.simgen import SimScenario, generate, get_scenario


def _write(path, text):
    path.write_text(text)
    return str(path)


class TestIngest:
    def test_well_formed_file(self, tmp_path):
        path = _write(tmp_path / "panel.csv", "\n".join([
            "subject_id,time,y_1,y_2,x_1",
            "a,1,0.5,1.0,1",
            "a,2,0.25,2.0,1",
            "a,3,0.1,3.0,1",
            "b,1,1.5,0.0,1",
            "b,2,2.5,1.0,1",
            "b,3,3.5,2.0,1",
        ]))
        ds = ingest(path)
        assert ds.n_subjects == 2 and ds.p == 2 and ds.d == 1
        assert [s.T for s in ds.subjects] == [3, 3]

    def test_duplicate_subject_time_names_line(self, tmp_path):
        path = _write(tmp_path / "panel.csv", "\n".join([
            "subject_id,time,y_1,x_1",
            "s1,1,0.5,1",
            "s1,5,1.5,1",
            "s1,5,2.5,1",
        ]))
        with pytest.raises(ValidationError, match=r":4:.*duplicate"):
            ingest(path)

    def test_non_numeric_cell_names_line(self, tmp_path):
        path = _write(tmp_path / "panel.csv", "\n".join([
            "subject_id,time,y_1,x_1",
            "s1,1,0.5,1",
            "s1,2,oops,1",
        ]))
        with pytest.raises(ValidationError, match=r":3:"):
            ingest(path)

    def test_missing_y_rows_dropped(self, tmp_path, capsys):
        path = _write(tmp_path / "panel.csv", "\n".join([
            "subject_id,time,y_1,x_1",
            "s1,1,0.5,1",
            "s1,2,,1",
            "s1,3,1.5,1",
            "s1,4,2.0,1",
        ]))
        ds = ingest(path)
        assert ds.subjects[0].T == 3
        assert np.array_equal(ds.subjects[0].times, [1, 3, 4])

    def test_add_intercept(self, tmp_path):
        path = _write(tmp_path / "panel.csv", "\n".join([
            "subject_id,time,y_1,x_1",
            "s1,1,0.5,0.3",
            "s1,2,1.5,0.3",
        ]))
        ds = ingest(path, add_intercept=True)
        assert ds.d == 2
        assert np.all(ds.subjects[0].X[0] == 1.0)
        assert np.all(ds.subjects[0].X[1] == 0.3)

    def test_round_trip_of_generated_panel(self, tmp_path):
        dataset, _ = generate(
            SimScenario(name="ct-small", mode="ct", n_subjects=6,
                        ct_t_range=(5, 9)),
            seed=3,
        )
        path = tmp_path / "panel.csv"
        write_panel_csv(path, dataset)
        back = ingest(str(path))
        assert back.n_subjects == dataset.n_subjects
        for a, b in zip(dataset.subjects, back.subjects):
            assert a.id == b.id
            assert np.array_equal(a.times, b.times)
            assert np.array_equal(a.Y, b.Y)
            assert np.array_equal(a.X, b.X)


class TestCommands:
    def _simulate(self, tmp_path, scenario="dt-baseline", seed=0, name="sim"):
        out = tmp_path / name
        code = main(["simulate", "--scenario", scenario, "--seed", str(seed),
                     "--out", str(out)])
        assert code == 0
        return out

    def test_simulate_deterministic_bytes(self, tmp_path):
        a = self._simulate(tmp_path, name="a")
        b = self._simulate(tmp_path, name="b")
        assert (a / "panel.csv").read_bytes() == (b / "panel.csv").read_bytes()
        assert (a / "truth.json").read_bytes() == (b / "truth.json").read_bytes()

    def test_simulate_list_includes_variants(self, capsys):
        assert main(["simulate", "--list"]) == 0
        out = capsys.readouterr().out.split()
        assert "dt-baseline" in out and "ct-baseline" in out
        assert "dt-psi-0.1" in out and "ct-freq-transit" in out
        assert "dt-t200" in out and "ct-t100-150" in out

    def test_simulate_unknown_scenario_exit_2(self, tmp_path):
        assert main(["simulate", "--scenario", "nope",
                     "--out", str(tmp_path / "x")]) == 2

    def test_fit_decode_rotate_pipeline(self, tmp_path, capsys):
        sim = self._simulate(tmp_path)
        fit_path = tmp_path / "fit.json"
        code = main([
            "fit", "--data", str(sim / "panel.csv"), "--mode", "dt",
            "--J", "2", "--K", "2", "--max-iters", "3", "--seed", "1",
            "--out", str(fit_path), "--emit-states",
        ])
        assert code == 0
        obj = json.loads(fit_path.read_text())
        assert obj["kind"] == "ehmfm-fit"
        assert obj["schema_version"] == 1
        assert len(obj["pi"]) == 2
        assert len(obj["lambda"]) == 2 and len(obj["lambda"][0]) == 23

        states_path = tmp_path / "states.csv"
        assert main(["decode", "--data", str(sim / "panel.csv"),
                     "--params", str(fit_path), "--out", str(states_path)]) == 0
        rows = states_path.read_text().strip().splitlines()
        assert rows[0] == "subject_id,time,state"
        states = {int(r.split(",")[2]) for r in rows[1:]}
        assert states <= {1, 2}

        rot_path = tmp_path / "loadings.csv"
        assert main(["rotate", "--params", str(fit_path),
                     "--out", str(rot_path)]) == 0
        header = rot_path.read_text().splitlines()[0]
        assert header == "state,variable,factor,loading,flagged"

    def test_fit_byte_determinism(self, tmp_path):
        sim = self._simulate(tmp_path)
        outs = []
        for name in ("f1.json", "f2.json"):
            path = tmp_path / name
            code = main([
                "fit", "--data", str(sim / "panel.csv"), "--mode", "dt",
                "--J", "2", "--K", "2", "--max-iters", "3", "--seed", "5",
                "--workers", "1", "--out", str(path),
            ])
            assert code == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_ct_on_regular_panel_requires_force(self, tmp_path):
        sim = self._simulate(tmp_path)
        code = main([
            "fit", "--data", str(sim / "panel.csv"), "--mode", "ct",
            "--J", "2", "--K", "2", "--max-iters", "2",
            "--out", str(tmp_path / "f.json"),
        ])
        assert code == 2
        code = main([
            "fit", "--data", str(sim / "panel.csv"), "--mode", "ct",
            "--J", "2", "--K", "2", "--max-iters", "2", "--force-ct",
            "--out", str(tmp_path / "f.json"),
        ])
        assert code == 0

    def test_select_and_report(self, tmp_path):
        sim = self._simulate(tmp_path, scenario="dt-baseline", seed=4)
        sel = tmp_path / "sel"
        code = main([
            "select", "--data", str(sim / "panel.csv"), "--mode", "dt",
            "--J", "1,2", "--K", "1", "--max-iters", "3",
            "--out", str(sel),
        ])
        assert code == 0
        table = (sel / "complexity_bic.csv").read_text().splitlines()
        assert table[0] == "J,K,q,BIC"
        assert len(table) == 3

        fits = tmp_path / "fits"
        fits.mkdir()
        for seed in (0, 1):
            code = main([
                "fit", "--data", str(sim / "panel.csv"), "--mode", "dt",
                "--J", "3", "--K", "3", "--max-iters", "4",
                "--seed", str(seed), "--out", str(fits / f"fit{seed}.json"),
                "--emit-states",
            ])
            assert code == 0
        rep = tmp_path / "rep"
        code = main([
            "report", "--fits", str(fits), "--truth", str(sim / "truth.json"),
            "--data", str(sim / "panel.csv"), "--out", str(rep),
        ])
        assert code == 0
        recovery = (rep / "recovery.csv").read_text().splitlines()
        assert recovery[0] == "statistic,pi,mu,lambda,psi,c_mis"
        bias = (rep / "transition_bias.csv").read_text().splitlines()
        assert bias[1].startswith("B_12,")
        assert len(bias) == 7   # six off-diagonal blocks
