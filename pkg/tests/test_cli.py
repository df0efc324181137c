import csv
import json
import math
from pathlib import Path

import pytest

from dpsaddle.cli import (
    CSV_COLUMNS,
    OUTPUT_DIR_ENV,
    ConfigError,
    cell_seed,
    fit_power_law,
    fit_rate,
    load_config,
    main,
    parse_config,
    run_experiment,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = """\
problem:
  kind: bilinear
algorithm:
  name: mode
n_grid: [4, 6]
trials: 50
seed: 3
estimates: [strong, weak, variance]
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_csv(path, xs, ys):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "mean"])
        for x, y in zip(xs, ys):
            w.writerow([x, y])


# ---------------------------------------------------------------------------
# configuration


def test_parse_valid_config():
    cfg = parse_config(SMALL)
    assert cfg.problem_kind == "bilinear" and cfg.n_grid == (4, 6) and cfg.trials == 50
    assert [a.name for a in cfg.algorithms] == ["mode"]


def test_unknown_key_reports_line():
    text = SMALL.replace("  name: mode\n", "  name: mode\n  colour: red\n")
    with pytest.raises(ConfigError) as info:
        parse_config(text, source="exp.yaml")
    assert str(info.value).startswith("exp.yaml:5:")
    assert "colour" in str(info.value)


@pytest.mark.parametrize(
    "old,new,fragment",
    [
        ("kind: bilinear", "kind: hinge", "unknown problem kind"),
        ("name: mode", "name: newton", "unknown algorithm"),
        ("n_grid: [4, 6]", "n_grid: [4, -6]", "n_grid"),
        ("trials: 50", "trials: 1", "trials"),
        ("estimates: [strong, weak, variance]", "estimates: [loud]", "unknown estimate"),
        ("seed: 3", "seed: 3\nworkers: 0", "workers"),
        ("seed: 3", "seed: 3\nprivacy: {epsilon: -1}", "epsilon"),
    ],
)
def test_invalid_fields_rejected(old, new, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(SMALL.replace(old, new))
    assert fragment in str(info.value)


def test_missing_required_key():
    with pytest.raises(ConfigError):
        parse_config(SMALL.replace("trials: 50\n", ""))


def test_broken_yaml_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config("problem:\n  kind: [bilinear\n", source="x.yaml")
    assert str(info.value).startswith("x.yaml:")


def test_both_algorithm_forms_rejected():
    text = SMALL + "algorithms:\n  - name: mode\n"
    with pytest.raises(ConfigError):
        parse_config(text)


def test_shipped_configs_parse():
    for path in sorted(CONFIGS.glob("*.yaml")):
        load_config(str(path))


# ---------------------------------------------------------------------------
# running


def test_rerun_is_byte_identical(tmp_path):
    cfg = parse_config(SMALL)
    a, _ = run_experiment(cfg, str(tmp_path / "a"))
    b, _ = run_experiment(cfg, str(tmp_path / "b"))
    assert Path(a).read_bytes() == Path(b).read_bytes()


def test_csv_schema_and_manifest(tmp_path):
    path, rows = run_experiment(parse_config(SMALL), str(tmp_path))
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == CSV_COLUMNS
    assert len(rows) == 6
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["rows"] == 6 and manifest["errors"] == 0 and "version" in manifest
    assert manifest["config"]["n_grid"] == [4, 6]


def test_worker_pool_gives_same_bytes(tmp_path):
    serial, _ = run_experiment(parse_config(SMALL), str(tmp_path / "s"))
    pooled, _ = run_experiment(parse_config(SMALL + "workers: 2\n"), str(tmp_path / "p"))
    assert Path(serial).read_bytes() == Path(pooled).read_bytes()


def test_env_var_overrides_config_dir(tmp_path, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(target))
    cfg = parse_config(SMALL + f"output_dir: {tmp_path / 'from_config'}\n")
    path, _ = run_experiment(cfg)
    assert Path(path).parent == target
    assert not (tmp_path / "from_config").exists()


def test_cell_seeds_distinct_and_stable():
    seeds = {cell_seed(0, a, n) for a in range(3) for n in (4, 8, 16)}
    assert len(seeds) == 9
    assert cell_seed(5, 1, 64) == cell_seed(5, 1, 64)


def test_separation_config(tmp_path):
    path, rows = run_experiment(load_config(str(CONFIGS / "separation.yaml")), str(tmp_path))
    by_kind = {r["kind"]: r for r in read_rows(path)}
    assert float(by_kind["strong"]["mean"]) == 2.0
    assert float(by_kind["weak"]["mean"]) <= 0.05


def test_exact_sweep_rows_decrease(tmp_path):
    path, _ = run_experiment(load_config(str(CONFIGS / "rate_exact.yaml")), str(tmp_path))
    rows = read_rows(path)
    assert len(rows) == 7 and all(r["kind"] == "strong" for r in rows)
    means = [float(r["mean"]) for r in rows]
    assert all(b < a for a, b in zip(means, means[1:]))


def test_cell_errors_recorded_and_exit_code(tmp_path):
    # odd n breaks the mode algorithm in one cell only
    config = tmp_path / "c.yaml"
    config.write_text(SMALL.replace("[4, 6]", "[4, 5]"))
    code = main(["run", str(config), "--output-dir", str(tmp_path / "out")])
    assert code == 1
    rows = read_rows(tmp_path / "out" / "results.csv")
    bad = [r for r in rows if r["error"]]
    assert bad and all(r["n"] == "5" for r in bad)
    assert all(r["mean"] for r in rows if r["n"] == "4")


def test_main_run_success(tmp_path, capsys):
    config = tmp_path / "c.yaml"
    config.write_text(SMALL)
    assert main(["run", str(config), "--output-dir", str(tmp_path / "out")]) == 0
    assert "wrote 6 rows" in capsys.readouterr().out


def test_main_bad_config_exit_code(tmp_path, capsys):
    config = tmp_path / "bad.yaml"
    config.write_text(SMALL.replace("  name: mode\n", "  name: mode\n  colour: red\n"))
    assert main(["run", str(config)]) == 2
    assert "bad.yaml:5:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# rate fitting


def test_fit_exact_inverse_sqrt(tmp_path):
    path = tmp_path / "r.csv"
    xs = [4, 16, 64]
    write_csv(path, xs, [1 / math.sqrt(x) for x in xs])
    slope, intercept, r2 = fit_rate(str(path), "n", "mean")
    assert abs(slope + 0.5) <= 1e-12
    assert abs(intercept) <= 1e-12 and r2 == pytest.approx(1.0)


def test_fit_constant_has_zero_slope():
    slope, _, _ = fit_power_law([2, 8, 32, 128], [0.3] * 4)
    assert abs(slope) <= 1e-12


def test_fit_rejects_nonpositive(tmp_path):
    path = tmp_path / "r.csv"
    write_csv(path, [1, 2, 3], [0.5, 0.0, 0.1])
    with pytest.raises(ValueError):
        fit_rate(str(path), "n", "mean")


def test_fit_needs_three_rows():
    with pytest.raises(ValueError):
        fit_power_law([1, 2], [1, 2])


def test_fit_unknown_column(tmp_path):
    path = tmp_path / "r.csv"
    write_csv(path, [1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        fit_rate(str(path), "n", "gap")


def test_fit_where_filter(tmp_path):
    path, _ = run_experiment(parse_config(SMALL.replace("[4, 6]", "[4, 6, 8, 10]")), str(tmp_path))
    slope, _, _ = fit_rate(path, "n", "mean", {"kind": "strong"})
    assert abs(slope) <= 1e-12


def test_main_fit_prints_json(tmp_path, capsys):
    path = tmp_path / "r.csv"
    write_csv(path, [4, 16, 64], [0.5, 0.25, 0.125])
    assert main(["fit", str(path), "--x", "n", "--y", "mean"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["slope"] == pytest.approx(-0.5)


def test_main_fit_error_exit(tmp_path):
    path = tmp_path / "r.csv"
    write_csv(path, [4, 16], [0.5, 0.25])
    assert main(["fit", str(path), "--x", "n", "--y", "mean"]) == 2


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    path = tmp_path / "r.csv"
    write_csv(path, [4, 16, 64], [1.0, 1.0, 1.0])
    out = subprocess.run(
        [sys.executable, "-m", "dpsaddle", "fit", str(path), "--x", "n", "--y", "mean"],
        capture_output=True, text=True, check=True,
    )
    assert json.loads(out.stdout)["slope"] == pytest.approx(0.0)


def test_algorithm_labels_disambiguate(tmp_path):
    text = SMALL.replace("algorithm:\n  name: mode\n", "algorithms:\n  - name: mode\n  - name: mode\n")
    _, rows = run_experiment(parse_config(text), str(tmp_path))
    assert {r["algorithm"] for r in rows} == {"mode#0", "mode#1"}


def test_private_config_labels_subroutines():
    from dpsaddle.cli import algorithm_labels

    cfg = load_config(str(CONFIGS / "rate_private.yaml"))
    assert algorithm_labels(cfg.algorithms) == [
        "recursive_regularization:noisy_sgda",
        "recursive_regularization:smooth",
    ]
