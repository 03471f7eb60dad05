"""CLI and experiment-orchestration tests.

Everything here runs against a deliberately tiny backbone (d=16, one
layer) so the full file stays in the seconds range.  The backbone is
pretrained once per module and cached on disk; configs reference the
cache through the inline-backbone path to exercise config resolution.
"""
import json

import numpy as np
import pytest

from accept.cli import main
from accept.experiments import (
    ConfigError,
    canonical_json,
    read_csv_rows,
    run_id_for,
    sweep_granularity_rows,
    write_csv,
)

TABLE_T = [16, 32, 64, 96, 128, 192, 256, 384, 768]
PREPEND_R = [12, 20, 30, 36, 40, 45, 48, 51, 55]
PREPEND_TOTAL = [74496, 74880, 75360, 75648, 75840, 76080, 76224, 76008, 76260]
ADDED_R = [2, 4, 8, 10, 13, 17, 20, 24, 30]
ADDED_TOTAL = [72192, 73728, 76800, 74240, 76032, 76544, 76800, 76800, 76800]


@pytest.fixture(scope="module")
def tiny_backbone_dir(tmp_path_factory):
    """Pretrain the d=16 test backbone once and reuse the saved copy."""
    from accept.backbone import BackboneConfig, PretrainConfig, pretrain_backbone
    from accept.tasks import gen_task

    cache = tmp_path_factory.mktemp("bb") / "tiny"
    cfg = BackboneConfig(
        d=16, layers=1, heads=2, vocab_size=32, max_len=8, num_classes=2, dtype="f32"
    )
    task = gen_task("majority", n=64, length=6, vocab_size=32, seed=3)
    model, _ = pretrain_backbone(
        cfg, [task], PretrainConfig(steps=20, batch_size=8, lr=2e-3, warmup=5, seed=0)
    )
    model.save(cache)
    return cache


def base_config(backbone_dir, **overrides):
    spec = {
        "name": "cli-test",
        "backbone": {"path": str(backbone_dir)},
        "train_set": {"kind": "majority", "n": 64, "length": 6, "vocab_size": 32, "seed": 5},
        "eval_set": {"kind": "majority", "n": 32, "length": 6, "vocab_size": 32, "seed": 6},
        "scpp": {"m": 2, "K": 2, "budget": 100},
        "run": {
            "steps": 20,
            "batch_size": 8,
            "warmup_steps": 5,
            "eval_interval": 10,
            "seed": 1,
        },
    }
    spec.update(overrides)
    return spec


def write_config(tmp_path, spec, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(spec), encoding="utf-8")
    return str(path)


# -- budget verb ------------------------------------------------------------------


def test_budget_solves_reference_prepended_cell(capsys):
    assert main(["budget", "--d", "768", "--positions", "60", "--K", "24",
                 "--budget", "46080"]) == 0
    out = capsys.readouterr().out
    assert "r=20" in out
    assert "params=44160" in out


def test_budget_solves_reference_added_cell(capsys):
    assert main(["budget", "--d", "768", "--positions", "256", "--K", "2",
                 "--budget", "30720"]) == 0
    out = capsys.readouterr().out
    assert "r=24" in out
    assert "params=30720" in out


def test_budget_zero_gives_rank_zero(capsys):
    assert main(["budget", "--d", "64", "--positions", "4", "--K", "2",
                 "--budget", "0"]) == 0
    out = capsys.readouterr().out
    assert "r=0" in out
    assert "params=0" in out


def test_budget_capacity_is_exact_bigint(capsys):
    assert main(["budget", "--d", "768", "--positions", "60", "--K", "24",
                 "--r", "20"]) == 0
    out = capsys.readouterr().out
    assert f"capacity={20 ** 24}" in out


def test_budget_rejects_bad_partition(capsys):
    assert main(["budget", "--d", "10", "--positions", "2", "--K", "3",
                 "--budget", "50"]) == 2


def test_budget_explicit_r_over_budget_exits_2(capsys):
    assert main(["budget", "--d", "64", "--positions", "4", "--K", "2",
                 "--r", "100", "--budget", "10"]) == 2


def test_unknown_verb_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["budget", "--d", "64"])
    assert exc.value.code == 2


# -- granularity sweep (counting) ------------------------------------------------------


def test_sweep_rows_reproduce_prepended_table():
    rows, notes = sweep_granularity_rows(
        budget=76800, d=768, positions=60, t_values=TABLE_T, complement=30720
    )
    assert notes == []
    assert [r for _, _, r, _, _ in rows] == PREPEND_R
    assert [tot for *_, tot in rows] == PREPEND_TOTAL


def test_sweep_rows_reproduce_added_table():
    rows, _ = sweep_granularity_rows(
        budget=76800, d=768, positions=256, t_values=TABLE_T, complement=46080
    )
    assert [r for _, _, r, _, _ in rows] == ADDED_R
    assert [tot for *_, tot in rows] == ADDED_TOTAL


def test_sweep_rows_skip_non_divisors_with_note():
    rows, notes = sweep_granularity_rows(budget=1000, d=64, positions=4, t_values=[7, 16])
    assert [t for t, *_ in rows] == [16]
    assert any("t=7" in n for n in notes)


def test_sweep_rows_reject_complement_at_or_over_budget():
    with pytest.raises(ConfigError):
        sweep_granularity_rows(budget=100, d=16, positions=2, t_values=[4], complement=100)


def test_sweep_no_train_cli_emits_table(capsys):
    argv = ["sweep-granularity", "--no-train", "--budget", "76800",
            "--complement", "30720", "--d", "768", "--positions", "60",
            "--t-values", ",".join(str(t) for t in TABLE_T)]
    assert main(argv) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0] == "t,K,r,params,total_params"
    got = [tuple(int(v) for v in ln.split(",")) for ln in lines[1:]]
    assert [g[2] for g in got] == PREPEND_R
    assert [g[4] for g in got] == PREPEND_TOTAL


def test_sweep_no_train_requires_dims(capsys):
    assert main(["sweep-granularity", "--no-train", "--budget", "100"]) == 2


# -- csv + run id plumbing ---------------------------------------------------------------


def test_write_csv_byte_stable(tmp_path):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    rows = [(1, 0.1, "x"), (2, 0.25, "y")]
    write_csv(p1, ["i", "v", "s"], rows)
    write_csv(p2, ["i", "v", "s"], rows)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes().endswith(b"\n")
    assert b"\r" not in p1.read_bytes()


def test_write_csv_floats_round_trip(tmp_path):
    vals = [0.1, 1 / 3, 2.5e-17, 1e300]
    write_csv(tmp_path / "f.csv", ["v"], [(v,) for v in vals])
    _, rows = read_csv_rows(tmp_path / "f.csv")
    assert [float(r[0]) for r in rows] == vals


def test_write_csv_rejects_ragged_rows(tmp_path):
    with pytest.raises(ConfigError):
        write_csv(tmp_path / "r.csv", ["a", "b"], [(1,)])


def test_run_id_ignores_key_order():
    assert run_id_for({"a": 1, "b": [2, 3]}) == run_id_for({"b": [2, 3], "a": 1})


def test_run_id_sensitive_to_values():
    assert run_id_for({"a": 1}) != run_id_for({"a": 2})


def test_canonical_json_is_compact_and_sorted():
    assert canonical_json({"b": 1, "a": [1.5, None]}) == '{"a":[1.5,null],"b":1}'


# -- train verb ------------------------------------------------------------------------


def test_train_writes_run_directory(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "runs")]) == 0
    run_dirs = list((tmp_path / "runs").iterdir())
    assert len(run_dirs) == 1
    rd = run_dirs[0]
    assert (rd / "config.json").exists()
    assert (rd / "history.csv").exists()
    assert (rd / "summary.json").exists()
    assert (rd / "best" / "history.json").exists()
    header, rows = read_csv_rows(rd / "history.csv")
    assert header == ["step", "train_loss", "eval_metric"]
    assert [int(r[0]) for r in rows] == [10, 20]


def test_train_reruns_byte_identical_history(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    runs = str(tmp_path / "runs")
    assert main(["train", cfg, "--runs-dir", runs]) == 0
    rd = next((tmp_path / "runs").iterdir())
    first = (rd / "history.csv").read_bytes()
    assert main(["train", cfg, "--runs-dir", runs]) == 0
    assert (rd / "history.csv").read_bytes() == first


def test_train_summary_recomputes_param_counts(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir, scap={"K": 1, "r": 2})
    cfg = write_config(tmp_path, spec)
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "runs")]) == 0
    rd = next((tmp_path / "runs").iterdir())
    summary = json.loads((rd / "summary.json").read_text())
    # scpp: solve_rank(100, 16, 2, 2) = 5 -> 5*16 + 5*2*2 = 100
    assert summary["params"]["scpp"] == 100
    # scap: r=2 explicit -> 2*16 + 2*8*1 = 48
    assert summary["params"]["scap"] == 48
    assert summary["params"]["total"] == 148
    assert summary["trainable_params"] == 148


def test_train_over_budget_refused_without_flag(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir)
    spec["scpp"] = {"m": 2, "K": 2, "r": 50, "budget": 100}
    cfg = write_config(tmp_path, spec)
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "runs")]) == 2
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "runs"),
                 "--allow-over-budget"]) == 0


def test_train_missing_config_exits_2(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope.json")]) == 2


def test_train_invalid_json_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["train", str(bad)]) == 2


def test_train_infeasible_budget_exits_2(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir)
    spec["scpp"] = {"m": 2, "K": 2, "budget": 3}
    cfg = write_config(tmp_path, spec)
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "runs")]) == 2


def test_train_respects_runs_dir_env(tmp_path, tiny_backbone_dir, capsys, monkeypatch):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    monkeypatch.setenv("ACCEPT_RUNS_DIR", str(tmp_path / "envruns"))
    assert main(["train", cfg]) == 0
    assert any((tmp_path / "envruns").iterdir())


# -- eval + report verbs --------------------------------------------------------------


def test_eval_reloads_best_checkpoint(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    runs = str(tmp_path / "runs")
    assert main(["train", cfg, "--runs-dir", runs]) == 0
    rd = next((tmp_path / "runs").iterdir())
    summary = json.loads((rd / "summary.json").read_text())
    capsys.readouterr()
    assert main(["eval", "--run-dir", str(rd)]) == 0
    out = capsys.readouterr().out
    score = float(out.strip().split("=")[1])
    assert score == pytest.approx(summary["best_metric"])


def test_eval_accepts_inline_dataset(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    runs = str(tmp_path / "runs")
    assert main(["train", cfg, "--runs-dir", runs]) == 0
    rd = next((tmp_path / "runs").iterdir())
    ds = json.dumps({"kind": "majority", "n": 16, "length": 6, "vocab_size": 32, "seed": 9})
    assert main(["eval", "--run-dir", str(rd), "--dataset", ds]) == 0


def test_report_aggregates_summaries(tmp_path, tiny_backbone_dir, capsys):
    runs = str(tmp_path / "runs")
    for seed in (1, 2):
        spec = base_config(tiny_backbone_dir)
        spec["run"]["seed"] = seed
        cfg = write_config(tmp_path, spec, name=f"c{seed}.json")
        assert main(["train", cfg, "--runs-dir", runs]) == 0
    capsys.readouterr()
    assert main(["report", "--runs-dir", runs]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0].startswith("run_id,")
    assert len(lines) == 3


def test_report_missing_root_exits_2(tmp_path, capsys):
    assert main(["report", "--runs-dir", str(tmp_path / "absent")]) == 2


# -- ablation grid ----------------------------------------------------------------------


def test_ablate_grid_budgets_and_cells(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir, scap={"K": 1, "r": 2, "budget": 48})
    cfg = write_config(tmp_path, spec)
    out_csv = tmp_path / "ablate.csv"
    assert main(["ablate", cfg, "--runs-dir", str(tmp_path / "runs"),
                 "--out", str(out_csv)]) == 0
    header, rows = read_csv_rows(out_csv)
    assert header == ["cell", "params_prepended", "params_added", "params_total", "metric"]
    table = {r[0]: [int(r[1]), int(r[2]), int(r[3])] for r in rows}
    # Plain prompt tuning spends the whole 148 budget on rows: 9*16.
    assert table["pp"] == [144, 0, 144]
    # One shared codebook at the full budget: r = 148 // (16+2) = 8.
    assert table["pp+lc"] == [144, 0, 144]
    # Subdivision restores K=2: r = 148 // (16+4) = 7.
    assert table["pp+lc+ps"] == [140, 0, 140]
    # Added prompts split the budget: prepended 100, added 48.
    assert table["pp+lc+ps+ap"] == [100, 48, 148]
    assert all(v[2] <= 148 for v in table.values())


def test_ablate_axes_filter(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir, scap={"K": 1, "r": 2, "budget": 48})
    cfg = write_config(tmp_path, spec)
    out_csv = tmp_path / "ablate.csv"
    assert main(["ablate", cfg, "--axes", "pp,lc", "--runs-dir",
                 str(tmp_path / "runs"), "--out", str(out_csv)]) == 0
    _, rows = read_csv_rows(out_csv)
    assert [r[0] for r in rows] == ["pp", "pp+lc"]


def test_ablate_unknown_axis_exits_2(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir, scap={"K": 1, "r": 2, "budget": 48})
    cfg = write_config(tmp_path, spec)
    assert main(["ablate", cfg, "--axes", "pp,bogus",
                 "--runs-dir", str(tmp_path / "runs")]) == 2


# -- fewshot verb -------------------------------------------------------------------------


def test_fewshot_aggregate_matches_per_run_csvs(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    runs = tmp_path / "runs"
    assert main(["fewshot", cfg, "--gamma", "4,8", "--seeds", "2",
                 "--runs-dir", str(runs)]) == 0
    sweep_dir = next(runs.glob("fewshot-*"))
    _, agg = read_csv_rows(sweep_dir / "summary.csv")
    for gamma_s, mean_s, std_s, n_s in agg:
        _, rows = read_csv_rows(sweep_dir / f"gamma{gamma_s}.csv")
        vals = np.array([float(r[1]) for r in rows])
        assert float(mean_s) == float(np.mean(vals))
        assert float(std_s) == float(np.std(vals))
        assert int(n_s) == len(vals)


def test_fewshot_per_run_rows_are_metric_value_seed(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    runs = tmp_path / "runs"
    assert main(["fewshot", cfg, "--gamma", "4", "--seeds", "2",
                 "--runs-dir", str(runs)]) == 0
    sweep_dir = next(runs.glob("fewshot-*"))
    header, rows = read_csv_rows(sweep_dir / "gamma4.csv")
    assert header == ["metric", "value", "seed"]
    assert [r[0] for r in rows] == ["accuracy", "accuracy"]
    assert [int(r[2]) for r in rows] == [0, 1]


def test_fewshot_gamma_beyond_train_split_exits_1(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    assert main(["fewshot", cfg, "--gamma", "100000", "--seeds", "1",
                 "--runs-dir", str(tmp_path / "runs")]) == 1


def test_fewshot_single_seed_std_zero(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    runs = tmp_path / "runs"
    assert main(["fewshot", cfg, "--gamma", "4", "--seeds", "1",
                 "--runs-dir", str(runs)]) == 0
    sweep_dir = next(runs.glob("fewshot-*"))
    _, agg = read_csv_rows(sweep_dir / "summary.csv")
    assert float(agg[0][2]) == 0.0


# -- length sweep -------------------------------------------------------------------------


def test_length_sweep_normalizes_to_largest_length(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir, scap={"K": 1, "r": 2, "budget": 48})
    cfg = write_config(tmp_path, spec)
    out_csv = tmp_path / "lengths.csv"
    assert main(["length-sweep", cfg, "--lengths", "0,2,4",
                 "--runs-dir", str(tmp_path / "runs"), "--out", str(out_csv)]) == 0
    _, rows = read_csv_rows(out_csv)
    assert [int(r[0]) for r in rows] == [0, 2, 4]
    times = [float(r[2]) for r in rows]
    assert times[-1] == 1.0
    assert all(t > 0 for t in times)


def test_length_sweep_zero_needs_added_component(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))  # no scap block
    assert main(["length-sweep", cfg, "--lengths", "0,2",
                 "--runs-dir", str(tmp_path / "runs")]) == 2


def test_length_sweep_duplicate_lengths_exit_2(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir, scap={"K": 1, "r": 2, "budget": 48})
    cfg = write_config(tmp_path, spec)
    assert main(["length-sweep", cfg, "--lengths", "2,2",
                 "--runs-dir", str(tmp_path / "runs")]) == 2


# -- trained granularity sweep + parallel cells ----------------------------------------------


def test_sweep_with_training_re_solves_rank(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    out_csv = tmp_path / "sweep.csv"
    assert main(["sweep-granularity", "--config", cfg, "--component", "scpp",
                 "--budget", "100", "--t-values", "8,16",
                 "--runs-dir", str(tmp_path / "runs"), "--out", str(out_csv)]) == 0
    _, rows = read_csv_rows(out_csv)
    # t=8 -> K=2, r=100//20=5; t=16 -> K=1, r=100//18=5
    assert [(int(r[0]), int(r[1]), int(r[2])) for r in rows] == [(8, 2, 5), (16, 1, 5)]
    assert all(int(r[3]) <= 100 for r in rows)
    assert all(r[5] != "" for r in rows)


def test_parallel_jobs_match_serial_results(tmp_path, tiny_backbone_dir, capsys):
    cfg = write_config(tmp_path, base_config(tiny_backbone_dir))
    serial_csv, par_csv = tmp_path / "serial.csv", tmp_path / "par.csv"
    assert main(["sweep-granularity", "--config", cfg, "--component", "scpp",
                 "--budget", "100", "--t-values", "8,16",
                 "--runs-dir", str(tmp_path / "runs_s"), "--out", str(serial_csv)]) == 0
    assert main(["sweep-granularity", "--config", cfg, "--component", "scpp",
                 "--budget", "100", "--t-values", "8,16", "--jobs", "2",
                 "--runs-dir", str(tmp_path / "runs_p"), "--out", str(par_csv)]) == 0
    assert serial_csv.read_bytes() == par_csv.read_bytes()


def test_parallel_jobs_require_backbone_path(tmp_path, capsys):
    spec = {
        "name": "inline",
        "backbone": {
            "config": {"d": 16, "layers": 1, "heads": 2, "vocab_size": 32,
                       "max_len": 8, "num_classes": 2, "dtype": "f32"},
            "pretrain": {"steps": 5, "batch_size": 8, "seed": 0,
                         "tasks": [{"kind": "majority", "n": 32, "length": 6,
                                    "vocab_size": 32, "seed": 3}]},
        },
        "train_set": {"kind": "majority", "n": 32, "length": 6, "vocab_size": 32, "seed": 5},
        "eval_set": {"kind": "majority", "n": 32, "length": 6, "vocab_size": 32, "seed": 6},
        "scpp": {"m": 2, "K": 2, "budget": 100},
        "run": {"steps": 10, "batch_size": 8, "warmup_steps": 2, "eval_interval": 10, "seed": 1},
    }
    cfg = write_config(tmp_path, spec)
    assert main(["sweep-granularity", "--config", cfg, "--component", "scpp",
                 "--budget", "100", "--t-values", "8,16", "--jobs", "2",
                 "--runs-dir", str(tmp_path / "runs")]) == 2


# -- config resolution details ---------------------------------------------------------------


def test_inline_backbone_cache_round_trip(tmp_path, capsys):
    spec = {
        "name": "cached",
        "backbone": {
            "config": {"d": 16, "layers": 1, "heads": 2, "vocab_size": 32,
                       "max_len": 8, "num_classes": 2, "dtype": "f32"},
            "pretrain": {"steps": 5, "batch_size": 8, "seed": 0,
                         "tasks": [{"kind": "majority", "n": 32, "length": 6,
                                    "vocab_size": 32, "seed": 3}]},
            "cache_dir": str(tmp_path / "bbcache"),
        },
        "train_set": {"kind": "majority", "n": 32, "length": 6, "vocab_size": 32, "seed": 5},
        "eval_set": {"kind": "majority", "n": 32, "length": 6, "vocab_size": 32, "seed": 6},
        "scpp": {"m": 2, "K": 2, "budget": 100},
        "run": {"steps": 10, "batch_size": 8, "warmup_steps": 2, "eval_interval": 10, "seed": 1},
    }
    cfg = write_config(tmp_path, spec)
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "r1")]) == 0
    assert (tmp_path / "bbcache" / "arch.json").exists()
    # Second run loads the cache instead of re-pretraining and matches bytes.
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "r2")]) == 0
    h1 = next((tmp_path / "r1").glob("*/history.csv")).read_bytes()
    h2 = next((tmp_path / "r2").glob("*/history.csv")).read_bytes()
    assert h1 == h2


def test_config_requires_some_prompt_component(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir)
    del spec["scpp"]
    cfg = write_config(tmp_path, spec)
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "runs")]) == 2


def test_config_rejects_mismatched_class_counts(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir)
    spec["eval_set"] = {"kind": "count-regression", "n": 32, "length": 6,
                        "vocab_size": 32, "seed": 6}
    cfg = write_config(tmp_path, spec)
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "runs")]) == 2


def test_direct_prepend_trains_plain_prompt_rows(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir)
    del spec["scpp"]
    spec["direct_prepend"] = {"m": 3}
    cfg = write_config(tmp_path, spec)
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "runs")]) == 0
    rd = next((tmp_path / "runs").iterdir())
    summary = json.loads((rd / "summary.json").read_text())
    assert summary["params"]["direct_prepend"] == 48
    assert summary["trainable_params"] == 48
    # Direct rows are a baseline device; no factorized checkpoint exists.
    assert not (rd / "best").exists()


def test_direct_prepend_and_scpp_conflict(tmp_path, tiny_backbone_dir, capsys):
    spec = base_config(tiny_backbone_dir)
    spec["direct_prepend"] = {"m": 3}
    cfg = write_config(tmp_path, spec)
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "runs")]) == 2


def test_jsonl_dataset_source(tmp_path, tiny_backbone_dir, capsys):
    from accept.tasks import gen_task

    ds = gen_task("majority", n=16, length=6, vocab_size=32, seed=5)
    lines = [json.dumps({"tokens": list(ex.tokens), "label": ex.label}) for ex in ds.examples]
    data_path = tmp_path / "train.jsonl"
    data_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    spec = base_config(tiny_backbone_dir)
    spec["train_set"] = {"jsonl": str(data_path), "num_classes": 2, "vocab_size": 32}
    cfg = write_config(tmp_path, spec)
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "runs")]) == 0
