import json

import numpy as np
import pytest

from metaclust.cli import main
from metaclust.experiment import (
    ConfigError,
    aggregate,
    format_csv,
    format_table,
    parse_spec,
    read_rows,
    report,
    run_grid,
    summary_csv,
)

TINY = """
[experiment]
name = tiny
sbm_n_per_cluster = 12
sbm_k_clusters = 3
sbm_p_in = 0.4
sbm_p_out = 0.03
sbm_attr_dim = 4
noise_ratios = 0.3
graph_seeds = 0
seeds = 0, 1
variants = metagc, metagc-x
batch_size = 8
min_epochs = 2
max_epochs = 3
hidden = 8
meta_hidden = 4
z_dim = 4
record_wall_time = false
"""


def with_keys(**values):
    """TINY with some keys replaced or added."""
    lines = [ln for ln in TINY.splitlines() if ln.split(" = ")[0] not in values]
    return "\n".join(lines + [f"{k} = {v}" for k, v in values.items()]) + "\n"


def spec_in(tmp_path, text=TINY, out="run"):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(text + f"out = {out}\n")
    return cfg


# ------------------------------------------------------------------- config


def test_parse_spec_fields(tmp_path):
    spec = parse_spec(TINY, tmp_path)
    assert spec.seeds == (0, 1)
    assert spec.variants == ("metagc", "metagc-x")
    assert spec.sbm["p_in"] == 0.4 and spec.sbm["n_per_cluster"] == 12
    assert spec.train == {"batch_size": 8, "min_epochs": 2, "max_epochs": 3, "hidden": 8, "meta_hidden": 4, "z_dim": 4}
    assert spec.record_wall_time is False


@pytest.mark.parametrize(
    "key, value, message",
    [
        ("seeds", "", "seed"),
        ("noise_ratios", "-0.1", "non-negative"),
        ("bogus_key", "1", "unknown"),
        ("variants", "metagc-z", "variant"),
        ("batch_size", "many", "bad config"),
    ],
)
def test_bad_configs(key, value, message):
    with pytest.raises((ConfigError, ValueError), match=message):
        parse_spec(with_keys(**{key: value}))


def test_missing_section():
    with pytest.raises(ConfigError):
        parse_spec("[other]\nx = 1\n")


# --------------------------------------------------------------------- grid


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    base = tmp_path_factory.mktemp("grid")
    spec = parse_spec(TINY + "out = run\n", base)
    rows = run_grid(spec)
    return spec, rows


def test_grid_rows(grid):
    spec, rows = grid
    assert len(rows) == 4
    assert [(r["seed"], r["variant"]) for r in rows] == [(0, "metagc"), (0, "metagc-x"), (1, "metagc"), (1, "metagc-x")]
    assert all(r["status"] == "ok" for r in rows)
    for r in rows:
        if r["variant"] == "metagc-x":
            assert r["prauc"] is None and r["hits"] is None
        else:
            assert 0 <= r["prauc"] <= 1
        assert r["wall_ms"] == 0.0


def test_grid_artifacts(grid):
    spec, rows = grid
    out = spec.out_dir
    assert (out / "noisy" / "tiny_r0.3_g0.edges").is_file()
    assert len(list((out / "checkpoints").glob("*.json"))) == 4
    assert json.loads((out / "results.json").read_text())[0]["dataset"] == "tiny"
    back = read_rows(out / "results.csv")
    assert format_csv(back) == (out / "results.csv").read_text()


def test_grid_rerun_is_byte_identical(grid, tmp_path):
    spec, _ = grid
    spec2 = parse_spec(TINY + "out = again\n", tmp_path)
    run_grid(spec2)
    assert (tmp_path / "again" / "results.csv").read_bytes() == (spec.out_dir / "results.csv").read_bytes()
    for ck in (spec.out_dir / "checkpoints").glob("*.json"):
        assert ck.read_bytes() == (tmp_path / "again" / "checkpoints" / ck.name).read_bytes()


def test_threaded_grid_matches_serial(grid, tmp_path):
    spec, _ = grid
    spec2 = parse_spec(TINY + "out = threaded\n", tmp_path)
    run_grid(spec2, workers=3)
    assert (tmp_path / "threaded" / "results.csv").read_bytes() == (spec.out_dir / "results.csv").read_bytes()


def test_failed_run_is_recorded(tmp_path):
    # K larger than N fails validation for that run only
    rows = run_grid(parse_spec(with_keys(seeds="0", n_clusters=99, out="bad"), tmp_path))
    assert len(rows) == 2 and all(r["status"].startswith("failed") for r in rows)
    assert aggregate(rows) == []


def test_fifteen_trial_grid(tmp_path):
    spec = parse_spec(with_keys(graph_seeds="0, 1, 2, 3, 4", seeds="0, 1, 2"), tmp_path)
    assert len(spec.graph_seeds) * len(spec.seeds) == 15


# -------------------------------------------------------------- aggregation


def row(noise, variant, **metrics):
    base = {"noise": noise, "variant": variant, "status": "ok"}
    base.update(metrics)
    return base


def test_single_row_has_zero_std():
    s = aggregate([row(0.3, "metagc", f1=0.5, nmi=0.4, modularity=0.3)])
    assert s[0]["f1_std"] == 0.0 and s[0]["runs"] == 1


def test_mean_of_two():
    s = aggregate([row(0.3, "metagc", f1=0.2, nmi=0.2, modularity=0.2), row(0.3, "metagc", f1=0.4, nmi=0.4, modularity=0.4)])
    assert s[0]["f1_mean"] == pytest.approx(0.3)
    assert s[0]["f1_std"] == pytest.approx(0.1)


def test_fifteen_row_group_shape():
    rng = np.random.default_rng(0)
    rows = [row(0.6, "metagc", f1=rng.random(), nmi=rng.random(), modularity=rng.random()) for _ in range(15)]
    s = aggregate(rows)
    assert len(s) == 1 and s[0]["runs"] == 15
    header = summary_csv(s, ("f1", "nmi", "modularity")).splitlines()[0].split(",")
    assert header == ["noise", "variant", "runs", "f1_mean", "f1_std", "nmi_mean", "nmi_std", "modularity_mean", "modularity_std"]
    table = format_table(s)
    assert "II" in table and table.count("+-") == 3


def test_report_files(grid):
    spec, _ = grid
    text = report(spec.out_dir)
    assert (spec.out_dir / "summary.csv").is_file()
    assert (spec.out_dir / "ranking_summary.csv").is_file()
    assert "metagc-x" in text and "prauc" in text


# ---------------------------------------------------------------------- CLI


def test_cli_noise_is_byte_deterministic(tmp_path):
    cfg = spec_in(tmp_path)
    a, b = tmp_path / "a.edges", tmp_path / "b.edges"
    assert main(["noise", "--config", str(cfg), "--ratio", "0.6", "--seed", "3", "--out", str(a)]) == 0
    assert main(["noise", "--config", str(cfg), "--ratio", "0.6", "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_noise_ratio_zero_all_real(tmp_path):
    edges = tmp_path / "e.txt"
    labels = tmp_path / "y.csv"
    edges.write_text("0 1\n2 3\n")
    labels.write_text("0\n0\n1\n1\n")
    out = tmp_path / "n.edges"
    assert main(["noise", "--edges", str(edges), "--labels", str(labels), "--ratio", "0", "--out", str(out)]) == 0
    assert [ln.split()[2] for ln in out.read_text().splitlines()[1:]] == ["1", "1"]


def test_cli_train_eval_report(tmp_path, capsys):
    cfg = spec_in(tmp_path)
    assert main(["train", "--config", str(cfg), "--seed", "0", "--variant", "metagc"]) == 0
    out = capsys.readouterr().out
    assert out.count("\n") == 2 and ",metagc," in out
    run = tmp_path / "run"
    ck = run / "checkpoints" / "tiny_r0.3_g0_s0_metagc.json"
    noisy = run / "noisy" / "tiny_r0.3_g0.edges"
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ck), "--noisy", str(noisy)]) == 0
    scored = json.loads(capsys.readouterr().out)
    trained = read_rows(run / "results.csv")[0]
    for key in ("f1", "nmi", "modularity", "prauc", "hits"):
        assert scored[key] == trained[key]
    assert main(["report", str(run)]) == 0
    assert "metagc" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["verify", "--trials", "0"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["train"]) == 1
    assert main(["train", "--config", str(tmp_path / "none.ini")]) == 1
    assert main(["train", "--config", str(spec_in(tmp_path)), "--variant", "metagc-q"]) == 1
    assert main(["report", str(tmp_path)]) == 1
    missing = tmp_path / "missing.txt"
    assert main(["noise", "--edges", str(missing), "--labels", str(missing), "--ratio", "0.3", "--out", str(tmp_path / "o")]) == 2


def test_cli_verify_passes(capsys):
    assert main(["verify", "--seed", "1", "--trials", "10"]) == 0
    assert "all checks passed" in capsys.readouterr().out
