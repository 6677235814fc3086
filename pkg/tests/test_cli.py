import os

import numpy as np
import pytest
import torch

from exp.analogy.checkpoint import load_model, save_model
from exp.analogy.cli import THREADS_ENV, RunManifest, _default_threads, build_parser, main, sha256_of
from exp.analogy.config import ModelConfig, TrainConfig
from exp.analogy.data import Vocab, load_vocab
from exp.analogy.errors import ConfigError
from exp.analogy.evaluation import parse_kv, read_report
from exp.analogy.model import KGEModel
from exp.analogy.spectral import planted_family, write_matrix_file

TRAIN_ROWS = [
    ("a", "likes", "b"),
    ("b", "likes", "c"),
    ("c", "likes", "d"),
    ("d", "likes", "a"),
    ("a", "knows", "c"),
    ("b", "knows", "d"),
]


@pytest.fixture
def kg_files(write_tsv):
    return write_tsv("train.txt", TRAIN_ROWS), write_tsv("test.txt", [("c", "knows", "a"), ("a", "likes", "c")])


@pytest.fixture
def successor_model(tmp_path):
    """Saved HolE model that scores x -> x+1 (mod 3) as the only true tail."""
    model = KGEModel.from_tables(
        ModelConfig(model_kind="hole", dim=3), torch.eye(3, dtype=torch.float64), torch.tensor([[0.0, 0.0, 1.0]])
    )
    path = tmp_path / "successor.kgem"
    save_model(path, model, Vocab(["a", "b", "c"], ["next"]))
    return path


def test_train_writes_model_and_manifest(kg_files, tmp_path):
    train, test = kg_files
    out = tmp_path / "run" / "model.kgem"
    code = main(
        ["--quiet", "train", "--train", str(train), "--test", str(test), "--dim", "4", "--epochs", "2", "--threads", "1"]
        + ["--out", str(out), "--seed", "3"]
    )
    assert code == 0
    model, vocab = load_model(out)
    assert vocab.entity_names == ["a", "b", "c", "d"]
    assert model.kind == "analogy" and model.n == 2

    manifest = RunManifest.read(f"{out}.manifest")
    assert manifest.config.epochs == 2
    assert manifest.config.model.num_scalars == 2
    assert manifest.datasets == {"train": str(train), "test": str(test)}
    assert manifest.checksums["train"] == sha256_of(train)
    assert 0 < manifest.metrics["mrr_filt"] <= 1
    assert manifest.metrics["n_queries"] == 4
    assert set(manifest.timings) == {"load", "train", "total"}


def test_train_reuses_manifest_config(kg_files, tmp_path):
    train, _ = kg_files
    first = tmp_path / "first.kgem"
    assert main(["--quiet", "train", "--train", str(train), "--dim", "6", "--epochs", "1", "--out", str(first)]) == 0
    second = tmp_path / "second.kgem"
    args = ["--quiet", "train", "--train", str(train), "--config-from", f"{first}.manifest", "--out", str(second)]
    assert main(args) == 0
    assert RunManifest.read(f"{second}.manifest").config.model.dim == 6
    assert torch.equal(load_model(first)[0].entity, load_model(second)[0].entity)


def test_config_from_warns_about_ignored_flags(kg_files, tmp_path, capsys):
    train, _ = kg_files
    first = tmp_path / "first.kgem"
    assert main(["--quiet", "train", "--train", str(train), "--dim", "4", "--epochs", "1", "--out", str(first)]) == 0
    second = tmp_path / "second.kgem"
    args = ["train", "--train", str(train), "--config-from", f"{first}.manifest", "--epochs", "9", "--lr", "0.5"]
    assert main(args + ["--out", str(second)]) == 0
    assert RunManifest.read(f"{second}.manifest").config.epochs == 1
    output = " ".join(capsys.readouterr().out.split())
    assert "ignoring --lr, --epochs" in output


def test_train_from_data_dir_writes_vocab(kg_files, tmp_path, capsys):
    train, test = kg_files
    out = tmp_path / "dir.kgem"
    vocab_dir = tmp_path / "vocab"
    args = ["train", "--data-dir", str(tmp_path), "--dim", "4", "--epochs", "1", "--out", str(out), "--vocab-dir", str(vocab_dir)]
    assert main(args) == 0
    manifest = RunManifest.read(f"{out}.manifest")
    assert manifest.datasets == {"train": str(train), "test": str(test)}
    assert load_vocab(vocab_dir).entity_names == ["a", "b", "c", "d"]
    output = capsys.readouterr().out
    assert "4 entities, 2 relations" in output
    assert "TEST COMPLETE" in output


def test_train_rejects_both_sources(kg_files, tmp_path):
    train, _ = kg_files
    with pytest.raises(SystemExit) as info:
        main(["train", "--train", str(train), "--data-dir", str(tmp_path)])
    assert info.value.code == 2


def test_train_requires_training_file():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2


def test_bad_thread_env_is_a_config_error(kg_files, tmp_path, monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        _default_threads()
    train, _ = kg_files
    assert main(["--quiet", "train", "--train", str(train), "--epochs", "1", "--out", str(tmp_path / "m.kgem")]) == 2
    monkeypatch.setenv(THREADS_ENV, "3")
    assert _default_threads() == 3
    monkeypatch.delenv(THREADS_ENV)
    assert _default_threads() == 1


def test_eval_on_perfect_model(successor_model, write_tsv, tmp_path, capsys):
    test = write_tsv("test.txt", [("a", "next", "b"), ("b", "next", "c"), ("c", "next", "a")])
    out = tmp_path / "report.txt"
    code = main(["eval", "--model-file", str(successor_model), "--test", str(test), "--out", str(out)])
    assert code == 0
    report = read_report(out)
    assert report.mrr_filtered == 1.0
    assert report.hits_at[10] == 1.0
    assert report.n_queries == 6
    assert "no --train file given" in capsys.readouterr().out


def test_eval_rejects_unknown_names(successor_model, write_tsv):
    test = write_tsv("test.txt", [("a", "next", "zeta")])
    assert main(["--quiet", "eval", "--model-file", str(successor_model), "--test", str(test)]) == 1


def test_eval_missing_model_file(write_tsv, tmp_path):
    test = write_tsv("test.txt", [("a", "next", "b")])
    assert main(["--quiet", "eval", "--model-file", str(tmp_path / "none.kgem"), "--test", str(test)]) == 1


def test_verify_spectral_planted_family(tmp_path, capsys):
    family, _, _ = planted_family(k=5, m=8, n=4, seed=0)
    path = tmp_path / "family.txt"
    write_matrix_file(path, family)
    assert main(["verify-spectral", str(path)]) == 0
    assert "All residuals within tolerance" in capsys.readouterr().out


def test_verify_spectral_identity(tmp_path):
    path = tmp_path / "identity.txt"
    write_matrix_file(path, [torch.eye(4, dtype=torch.float64)])
    assert main(["--quiet", "verify-spectral", str(path)]) == 0


def test_verify_spectral_rejects_non_commuting(tmp_path):
    family, _, _ = planted_family(k=2, m=4, n=2, seed=1)
    family[0] = family[0] + 0.1 * torch.triu(torch.ones(4, 4, dtype=torch.float64), diagonal=1)
    path = tmp_path / "bad.txt"
    write_matrix_file(path, family)
    assert main(["--quiet", "verify-spectral", str(path)]) == 1


def test_bench_writes_timings_and_plot(tmp_path):
    out, plot = tmp_path / "bench.txt", tmp_path / "bench.png"
    args = ["--quiet", "bench", "--threads", "1", "--dim", "4,6", "--epochs", "1", "--batch-size", "256"]
    assert main(args + ["--out", str(out), "--plot", str(plot)]) == 0
    lines = out.read_text().splitlines()
    assert [line.split("=")[0] for line in lines] == ["threads1_dim4", "threads1_dim6"]
    assert plot.stat().st_size > 0


def test_manifest_round_trip(tmp_path):
    manifest = RunManifest(
        TrainConfig(epochs=9),
        datasets={"train": "/data/my train.txt"},
        checksums={"train": "ab" * 32},
        timings={"total": 1.25},
        metrics={"mrr_filt": 0.5},
    )
    path = tmp_path / "run.manifest"
    manifest.write(path)
    assert RunManifest.read(path) == manifest


def test_parser_lists_subcommands():
    parser = build_parser()
    assert parser.parse_args(["verify-spectral", "f.txt"]).tol == 1e-8
    assert parser.parse_args(["bench"]).threads == (1, 2, 4, 8)
    assert parser.parse_args(["eval", "--model-file", "m", "--test", "t"]).filter_splits == ("train", "valid", "test")


def _bench(tmp_path, *flags: str) -> dict[str, float]:
    out = tmp_path / "bench.txt"
    assert main(["--quiet", "bench", "--entities", "2000", "--epochs", "3", *flags, "--out", str(out)]) == 0
    return {key: float(value) for key, value in parse_kv(out.read_text()).items()}


@pytest.mark.slow
def test_bench_epoch_time_grows_linearly_with_dim(tmp_path):
    dims = np.array([50.0, 100.0, 200.0])
    secs = _bench(tmp_path, "--threads", "1", "--dim", "50,100,200")
    ys = np.array([secs[f"threads1_dim{int(d)}"] for d in dims])
    slope, intercept = np.polyfit(dims, ys, 1)
    fitted = slope * dims + intercept
    r_squared = 1 - ((ys - fitted) ** 2).sum() / ((ys - ys.mean()) ** 2).sum()
    assert slope > 0
    assert r_squared >= 0.9


@pytest.mark.slow
@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="needs 4 cores")
def test_bench_epoch_time_does_not_grow_with_workers(tmp_path):
    threads = [1, 2, 4]
    secs = _bench(tmp_path, "--threads", ",".join(map(str, threads)), "--dim", "100")
    ys = [secs[f"threads{t}_dim100"] for t in threads]
    # 10% slack for timer noise
    assert all(later <= 1.1 * earlier for earlier, later in zip(ys, ys[1:]))
