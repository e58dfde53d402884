import numpy as np
import pytest

from nucpan import cli, imagecore
from nucpan.config import ConfigError, PipelineConfig

SMALL = """
[synth]
n_tiles = 20
size = 48
[train]
steps = 12
batch_size = 2
[tta]
passes = 2
[tune]
seed_threshold = 0.6, 0.7
fg_threshold = 0.5
min_area = 10
min_solidity = 0.8
"""

STAGES = ("synth", "encode", "train", "infer", "post", "tune", "eval")


def run_pipeline(root, ini_text=SMALL):
    ini = root / "c.ini"
    ini.write_text(ini_text)
    c = ["--config", str(ini)]
    d = root / "data"
    steps = [
        ["synth", *c, "--out", str(d)],
        ["encode-targets", *c, "--data", str(d), "--out", str(root / "tgt")],
        ["sample-stats", *c, "--data", str(d), "--out", str(root / "stats.csv")],
        ["train", *c, "--data", str(d), "--out", str(root / "run")],
        ["infer", *c, "--model", str(root / "run" / "model"), "--data", str(d),
         "--out", str(root / "probs")],
        ["postprocess", *c, "--probs", str(root / "probs"), "--out", str(root / "pred")],
        ["tune", *c, "--probs", str(root / "probs"), "--gt", str(d), "--out", str(root / "tune")],
        ["evaluate", *c, "--pred", str(root / "pred"), "--gt", str(d), "--out", str(root / "eval")],
    ]
    for argv in steps:
        assert cli.main(argv) == cli.EXIT_OK, argv


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    run_pipeline(a)
    run_pipeline(b)
    return a, b


def test_smoke_run_emits_all_artifacts(pipeline_runs):
    root, _ = pipeline_runs
    d = root / "data"
    assert len(list(d.glob("tile_*.png"))) == 20
    for suffix in ("_inst.ntns", "_sem.ntns", "_classes.csv", "_counts.csv"):
        assert (d / f"tile_0000{suffix}").exists()
    assert imagecore.read_tensor(d / "tile_0000_inst.ntns").dtype == np.uint16
    assert imagecore.read_tensor(d / "tile_0000_sem.ntns").dtype == np.uint8
    assert (root / "tgt" / "tile_0019_tri.ntns").exists()
    assert (root / "tgt" / "tile_0019_vec.ntns").exists()
    assert (root / "stats.csv").read_text().startswith("image_id,X_0")
    assert (root / "run" / "model" / "manifest.txt").exists()
    assert len((root / "run" / "train_log.csv").read_text().splitlines()) == 13
    sem = imagecore.read_tensor(root / "probs" / "tile_0003_semprob.ntns")
    assert sem.shape == (48, 48, 7) and np.allclose(sem.sum(-1), 1, atol=1e-5)
    assert (root / "pred" / "tile_0003_inst.ntns").exists()
    assert (root / "tune" / "best_postprocess.ini").exists()
    assert (root / "tune" / "scores.csv").exists()
    assert (root / "eval" / "report.csv").read_text().startswith("mPQ+,R2,neu")
    for sub in ("data", "tgt", "run", "probs", "pred", "tune", "eval"):
        assert (root / sub / "config.ini").exists(), sub


def test_reruns_are_byte_identical(pipeline_runs):
    a, b = pipeline_runs
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_tuned_config_is_loadable(pipeline_runs, tmp_path):
    root, _ = pipeline_runs
    cfg = PipelineConfig.load(root / "tune" / "best_postprocess.ini")
    assert cfg.postprocess().watershed.seed[1] in (0.6, 0.7)


def test_evaluate_gt_against_itself(pipeline_runs, tmp_path, capsys):
    root, _ = pipeline_runs
    d = str(root / "data")
    assert cli.main(["evaluate", "--pred", d, "--gt", d, "--out", str(tmp_path)]) == 0
    header, values = (tmp_path / "report.csv").read_text().splitlines()
    row = dict(zip(header.split(","), map(float, values.split(","))))
    assert row["R2"] == 1.0
    counts = np.loadtxt(root / "data" / "counts.csv", delimiter=",", skiprows=1,
                        usecols=range(1, 7)).sum(axis=0)
    assert row["mPQ+"] == pytest.approx((counts > 0).sum() / 6)
    assert all(row[n] == 1.0 for n, c in zip(("neu", "epi", "lym", "pla", "eos", "con"), counts)
               if c > 0)


def test_evaluate_fixture_with_every_class(tmp_path):
    inst = np.zeros((12, 12), np.uint16)
    classes = {}
    for k in range(6):
        y, x = divmod(k, 3)
        inst[y * 6:y * 6 + 4, x * 4:x * 4 + 3] = k + 1
        classes[k + 1] = k + 1
    for i in range(2):
        cli.write_instances(tmp_path, f"tile_{i:04d}", inst, classes)
    out = tmp_path / "out"
    assert cli.main(["evaluate", "--pred", str(tmp_path), "--gt", str(tmp_path),
                     "--out", str(out)]) == 0
    vals = (out / "report.csv").read_text().splitlines()[1].split(",")
    assert float(vals[0]) == 1.0 and float(vals[1]) == 1.0


def test_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    code = cli.main(["evaluate", "--pred", str(missing), "--gt", str(tmp_path),
                     "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_IO
    assert str(missing) in capsys.readouterr().err


def test_missing_partner_file(tmp_path, capsys):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    cli.write_instances(tmp_path / "p", "tile_0000", np.zeros((4, 4), np.uint16), {})
    code = cli.main(["evaluate", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"),
                     "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_IO
    assert "tile_0000_inst.ntns" in capsys.readouterr().err


def test_corrupt_tensor_is_io_error(tmp_path):
    (tmp_path / "tile_0000_inst.ntns").write_bytes(b"XXXX")
    (tmp_path / "tile_0000_classes.csv").write_text("instance_id,class\n")
    assert cli.main(["evaluate", "--pred", str(tmp_path), "--gt", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_IO


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["synth", "--set", "synth.colour=1", "--out", str(tmp_path)]) == \
        cli.EXIT_CONFIG
    bad = tmp_path / "bad.ini"
    bad.write_text("[nonsense]\nx = 1\n")
    assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "nonsense" in capsys.readouterr().err


def test_divergence_exit_4(tmp_path):
    d = tmp_path / "d"
    assert cli.main(["synth", "--set", "synth.n_tiles=3", "--set", "synth.size=16",
                     "--out", str(d)]) == 0
    code = cli.main(["train", "--data", str(d), "--out", str(tmp_path / "r"),
                     "--set", "train.steps=40", "--set", "train.lr_base=1e6",
                     "--set", "train.lr_min=1e6", "--set", "train.val_fraction=0",
                     "--set", "train.batch_size=1"])
    assert code == cli.EXIT_DIVERGED
    # three tiles cannot fill a batch of four
    code = cli.main(["train", "--data", str(d), "--out", str(tmp_path / "r"),
                     "--set", "train.val_fraction=0", "--set", "train.batch_size=4"])
    assert code == cli.EXIT_CONFIG


def test_thread_env_and_override(monkeypatch):
    monkeypatch.setenv("NUCPAN_THREADS", "3")
    assert PipelineConfig.load()["run"]["threads"] == 3
    assert PipelineConfig.load(overrides=["run.threads=2"])["run"]["threads"] == 2


def test_config_parsing_rules(tmp_path):
    cfg = PipelineConfig.load(overrides=["postprocess.min_area=1,2,3,4,5,6",
                                         "postprocess.seed_threshold=0.7",
                                         "augment.dihedral=off"])
    pc = cfg.postprocess()
    assert pc.filters.min_area[1:] == (1, 2, 3, 4, 5, 6)
    assert pc.watershed.seed[1:] == (0.7,) * 6
    assert cfg.train().augment.dihedral is False
    for bad in ("postprocess.min_area=1,2", "train.steps=ten", "augment.dihedral=maybe",
                "sampler.rng=MT19937", "postprocess.seed_threshold=0.3", "nosection",
                "tune.objective=f1"):
        with pytest.raises(ConfigError):
            PipelineConfig.load(overrides=[bad])


def test_echo_round_trips(tmp_path):
    cfg = PipelineConfig.load(overrides=["train.steps=7", "postprocess.min_area=3"])
    cfg.echo(tmp_path)
    again = PipelineConfig.load(tmp_path / "config.ini")
    assert again.values == cfg.values


def test_defaults_match_module_defaults():
    from nucpan.training import TrainConfig

    assert PipelineConfig.load().train() == TrainConfig()
