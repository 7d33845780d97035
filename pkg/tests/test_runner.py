"""Run orchestration and persistence tests (tiny budgets throughout)."""

import json
from pathlib import Path

import numpy as np
import pytest

from trajdiff.config import config_from_dict, loads
from trajdiff.metrics import GapReport
from trajdiff.runner import (
    gap_report_for,
    leakage_curve,
    load_checkpoint,
    preset_table1,
    preset_table3,
    reevaluate,
    run_experiment,
    run_id_for,
)


def tiny_cfg(tmp_path, seed=1, **train):
    base = {"mode": "stepwise", "steps": 12, "batch_size": 16}
    base.update(train)
    return config_from_dict({
        "data": {"n": 256, "k": 8},
        "model": {"hidden": [16, 16]},
        "train": base,
        "eval": {"n_samples": 64},
        "run": {"out_dir": str(tmp_path), "seed": seed, "checkpoint_every": 5},
    })


class TestRunExperiment:
    def test_artifacts(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        rec = run_experiment(cfg)
        rd = Path(rec.run_dir)
        assert rd.name == run_id_for(cfg)
        assert (rd / "config.toml").read_text() == cfg.to_toml()
        lines = (rd / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 12
        first = json.loads(lines[0])
        assert {"step", "mode", "loss", "grad_norm", "param_norm",
                "wall_time"} <= set(first)
        names = [Path(p).name for p in rec.checkpoint_paths]
        assert names == ["checkpoint-step000005.json",
                         "checkpoint-step000010.json",
                         "checkpoint-final.json"]
        assert (rd / "runrecord.json").exists()
        assert len(rec.reports) == 1 and rec.reports[0].nfe == 4

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        rec1 = run_experiment(cfg)
        fm1 = (Path(rec1.run_dir) / "final_metrics.json").read_bytes()
        rec2 = run_experiment(cfg)
        fm2 = (Path(rec2.run_dir) / "final_metrics.json").read_bytes()
        assert fm1 == fm2
        assert rec1.checkpoint_hashes == rec2.checkpoint_hashes

    def test_zero_steps_evaluates_init_model(self, tmp_path):
        rec = run_experiment(tiny_cfg(tmp_path, steps=0))
        assert [Path(p).name for p in rec.checkpoint_paths] == ["checkpoint-final.json"]
        assert Path(rec.metrics_path).stat().st_size == 0
        assert len(rec.reports) == 1

    def test_divergence_aborts_with_checkpoint(self, tmp_path):
        cfg = tiny_cfg(tmp_path, steps=200, lr=1e18)
        with pytest.raises(RuntimeError, match="checkpoint retained at"), \
                np.errstate(all="ignore"):
            run_experiment(cfg)
        rd = Path(tmp_path) / run_id_for(cfg)
        assert (rd / "checkpoint-abort.json").exists()
        assert (rd / "metrics.jsonl").stat().st_size > 0

    def test_inline_pretrain_phase(self, tmp_path):
        cfg = tiny_cfg(tmp_path, mode="e2e", steps=6, pretrain_steps=9,
                       loss="l2+lpips", nfe=3)
        rec = run_experiment(cfg)
        modes = [json.loads(l)["mode"]
                 for l in Path(rec.metrics_path).read_text().splitlines()]
        assert modes.count("stepwise") == 9 and modes.count("e2e") == 6
        assert modes[:9] == ["stepwise"] * 9
        names = [Path(p).name for p in rec.checkpoint_paths]
        assert "checkpoint-pretrain.json" in names

    def test_init_from_checkpoint_is_bit_exact(self, tmp_path):
        parent = run_experiment(tiny_cfg(tmp_path, seed=4))
        ckpt = parent.checkpoint_paths[-1]
        child_cfg = tiny_cfg(tmp_path, seed=4, mode="e2e", steps=0,
                             init_from=ckpt)
        child = run_experiment(child_cfg)
        net_parent, _, _, _ = load_checkpoint(ckpt)
        net_child, _, _, _ = load_checkpoint(child.checkpoint_paths[-1])
        for k in net_parent.params:
            assert net_parent.params[k].tobytes() == net_child.params[k].tobytes()

    def test_init_from_rejects_schedule_mismatch(self, tmp_path):
        parent = run_experiment(tiny_cfg(tmp_path, seed=5))
        d = {
            "data": {"n": 256, "k": 8},
            "schedule": {"t": 77},
            "model": {"hidden": [16, 16]},
            "train": {"mode": "e2e", "steps": 0,
                      "init_from": parent.checkpoint_paths[-1]},
            "eval": {"n_samples": 64},
            "run": {"out_dir": str(tmp_path), "seed": 5},
        }
        with pytest.raises(ValueError, match="does not match the"):
            run_experiment(config_from_dict(d))

    def test_gan_round_metrics(self, tmp_path):
        cfg = tiny_cfg(tmp_path, mode="e2e", steps=3, loss="l2+lpips+gan",
                       nfe=3, disc_updates_per_gen=5)
        rec = run_experiment(cfg)
        line = json.loads(Path(rec.metrics_path).read_text().splitlines()[0])
        assert len(line["disc_losses"]) == 5
        assert "gan_g" in line and "recon" in line

    def test_env_var_overrides_out_dir(self, tmp_path, monkeypatch):
        override = tmp_path / "elsewhere"
        monkeypatch.setenv("TRAJDIFF_OUT", str(override))
        cfg = tiny_cfg(tmp_path / "ignored", steps=1)
        rec = run_experiment(cfg)
        assert Path(rec.run_dir).parent == override


class TestLedger:
    def test_append_only_with_single_header(self, tmp_path):
        run_experiment(tiny_cfg(tmp_path, seed=1, steps=1))
        first = (tmp_path / "ledger.csv").read_text()
        run_experiment(tiny_cfg(tmp_path, seed=2, steps=1))
        second = (tmp_path / "ledger.csv").read_text()
        assert second.startswith(first)
        lines = second.splitlines()
        assert lines[0] == "run_id,mode,nfe,frechet,mmd,alignment"
        assert sum(1 for l in lines if l.startswith("run_id")) == 1
        assert len(lines) == 3

    def test_row_shape(self, tmp_path):
        rec = run_experiment(tiny_cfg(tmp_path, steps=1))
        row = (tmp_path / "ledger.csv").read_text().splitlines()[1].split(",")
        assert row[0] == rec.run_id
        assert row[1] == "stepwise" and row[2] == "4"
        assert float(row[3]) == rec.reports[0].frechet


class TestReevaluate:
    def test_scores_checkpoint_without_retraining(self, tmp_path):
        rec = run_experiment(tiny_cfg(tmp_path, seed=3))
        r1 = reevaluate(rec.run_dir, nfe=3)
        r2 = reevaluate(rec.run_dir, nfe=3)
        assert [r.to_dict() for r in r1] == [r.to_dict() for r in r2]
        assert r1[0].nfe == 3
        assert (Path(rec.run_dir) / "eval-nfe3.json").exists()
        rows = (tmp_path / "ledger.csv").read_text().splitlines()
        assert len(rows) == 4  # header + train eval + two re-evals

    def test_matches_run_eval_at_same_settings(self, tmp_path):
        rec = run_experiment(tiny_cfg(tmp_path, seed=6))
        again = reevaluate(rec.run_dir, nfe=4)
        assert again[0].to_dict() == rec.reports[0].to_dict()


class TestDiagnostics:
    def test_leakage_curve_decreasing_on_ring(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        from trajdiff.runner import build_problem

        ds, schedule = build_problem(cfg)
        curve = leakage_curve(schedule, ds, ts=(1, 250, 500, 1000))
        kls = [kl for _, kl in curve]
        assert all(k > 0 for k in kls)
        assert all(a > b for a, b in zip(kls, kls[1:]))

    def test_gap_report_for_run(self, tmp_path):
        rec = run_experiment(tiny_cfg(tmp_path, seed=7))
        g = gap_report_for(rec.run_dir, seed=0)
        assert isinstance(g, GapReport)
        assert g.steps == (1000, 750, 500, 250)
        assert g.rollout >= 0.0


class TestPresets:
    def test_table1_structure(self, tmp_path):
        out = preset_table1(str(tmp_path), seeds=(0, 1), steps=4,
                            pretrain_steps=4, data_n=128, eval_n=32,
                            workers=1)
        assert len(out["stepwise"]) == 2
        assert len(out["e2e4"]) == 2 and len(out["e2e3"]) == 2
        assert len(out["stepwise_nfe3"]) == 2
        for rec in out["e2e4"]:
            cfg = loads((Path(rec.run_dir) / "config.toml").read_text())
            assert cfg.train.mode == "e2e"
            assert cfg.train.loss == "l2+lpips"
            assert cfg.train.nfe == 4
            assert cfg.train.lr == 3e-4
            assert "checkpoint-final" in cfg.train.init_from
        for rec in out["e2e3"]:
            assert rec.reports[0].nfe == 3
        # ledger: 2 stepwise + 2 re-evals + 4 children
        rows = (tmp_path / "ledger.csv").read_text().splitlines()
        assert len(rows) == 9

    def test_table3_structure(self, tmp_path):
        out = preset_table3(str(tmp_path), seed=0, steps=3,
                            pretrain_steps=3, data_n=128, eval_n=32,
                            workers=1)
        assert set(out["children"]) == {"l1", "l2", "lpips", "l2+lpips",
                                        "l2+lpips+gan"}
        shared = out["pretrain"].checkpoint_paths[-1]
        for rec in out["children"].values():
            cfg = loads((Path(rec.run_dir) / "config.toml").read_text())
            assert cfg.train.init_from == shared
        csv = Path(out["csv"]).read_text().splitlines()
        assert csv[0] == "loss,frechet,mmd,alignment"
        assert len(csv) == 6
        for line in csv[1:]:
            cells = line.split(",")
            float(cells[1]), float(cells[2]), float(cells[3])
