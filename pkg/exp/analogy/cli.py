import hashlib
import os
import sys
import time
from argparse import ArgumentParser, Namespace, _SubParsersAction
from dataclasses import dataclass, field
from pathlib import Path

import torch
from rich.console import Console
from rich.table import Table

from .checkpoint import load_model, save_model
from .config import MODEL_KINDS, SPLITS, DataConfig, EvalConfig, ModelConfig, SamplerConfig, TrainConfig, from_flat, to_flat
from .data import (
    KGDataset,
    build_filter_index,
    check_known_stats,
    dataset_paths,
    dataset_stats,
    load_dataset,
    load_triples,
    make_synthetic_kg,
    save_vocab,
)
from .errors import ConfigError, KGError
from .evaluation import evaluate, format_kv, parse_kv, reference_table, report_table, write_report
from .observer import Observer
from .spectral import read_matrix_file, verify_corollary_equivalence
from .train import Trainer

THREADS_ENV = "KGE_NUM_THREADS"


def _csv(kind: type):
    def parse(raw: str) -> tuple:
        return tuple(kind(v) for v in raw.split(",") if v)

    return parse


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def sha256_of(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    config: TrainConfig
    datasets: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)

    def to_flat(self) -> dict[str, str]:
        flat = to_flat(self.config, prefix="config.")
        flat.update({f"data.{k}": v for k, v in self.datasets.items()})
        flat.update({f"sha256.{k}": v for k, v in self.checksums.items()})
        flat.update({f"time.{k}": repr(v) for k, v in self.timings.items()})
        flat.update({f"metric.{k}": repr(v) for k, v in self.metrics.items()})
        return flat

    def write(self, path: str | Path):
        Path(path).write_text(format_kv(self.to_flat()), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        flat = parse_kv(Path(path).read_text(encoding="utf-8"))

        def section(prefix: str) -> dict[str, str]:
            return {k[len(prefix) :]: v for k, v in flat.items() if k.startswith(prefix)}

        return cls(
            from_flat(flat, TrainConfig, prefix="config."),
            section("data."),
            section("sha256."),
            {k: float(v) for k, v in section("time.").items()},
            {k: float(v) for k, v in section("metric.").items()},
        )


def train_args(sub_parser: ArgumentParser):
    source = sub_parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--train", dest="train", type=str, help="Training triples (TSV).")
    source.add_argument("--data-dir", dest="data_dir", type=str, help="Directory holding train.txt and optional valid.txt / test.txt.")
    sub_parser.add_argument("--valid", dest="valid", default=None, type=str, help="Validation triples (TSV).")
    sub_parser.add_argument("--test", dest="test", default=None, type=str, help="Test triples, evaluated after training.")
    sub_parser.add_argument("--model", dest="model", default="analogy", choices=MODEL_KINDS, help="Default = analogy")
    sub_parser.add_argument("--dim", dest="dim", default=200, type=int, help="Embedding dimension m. Default = 200")
    sub_parser.add_argument(
        "--scalar-frac", dest="scalar_frac", default=0.5, type=float, help="Fraction n/m of scalar blocks. Default = 0.5"
    )
    sub_parser.add_argument("--neg-ratio", dest="neg_ratio", default=3, type=int, help="Negatives per positive. Default = 3")
    sub_parser.add_argument("--l2", dest="l2", default=1e-3, type=float, help="L2 weight decay. Default = 1e-3")
    sub_parser.add_argument("--lr", dest="lr", default=0.1, type=float, help="Initial learning rate. Default = 0.1")
    sub_parser.add_argument("--epochs", dest="epochs", default=500, type=int, help="Default = 500")
    sub_parser.add_argument("--batch-size", dest="batch_size", default=1, type=int, help="Samples per update. Default = 1")
    sub_parser.add_argument(
        "--threads", dest="threads", default=None, type=int, help=f"Worker processes. Default = ${THREADS_ENV} or 1"
    )
    sub_parser.add_argument("--seed", dest="seed", default=42, type=int, help="Default = 42")
    sub_parser.add_argument(
        "--filter-negatives", dest="filter_negatives", action="store_true", help="Redraw negatives that are known triples."
    )
    sub_parser.add_argument("--allow-duplicates", dest="allow_duplicates", action="store_true")
    sub_parser.add_argument("--filter-splits", dest="filter_splits", default=",".join(SPLITS), type=_csv(str))
    sub_parser.add_argument("--checkpoint-dir", dest="checkpoint_dir", default=None, type=str)
    sub_parser.add_argument("--checkpoint-interval", dest="checkpoint_interval", default=50, type=int)
    sub_parser.add_argument("--resume", dest="resume", action="store_true", help="Resume from the newest checkpoint.")
    sub_parser.add_argument(
        "--eval-interval", dest="eval_interval", default=None, type=int, help="Validation MRR every k epochs."
    )
    sub_parser.add_argument("--log-dir", dest="log_dir", default=None, type=str, help="TensorBoard log directory.")
    sub_parser.add_argument("--config-from", dest="config_from", default=None, type=str, help="Reuse a run manifest's config.")
    sub_parser.add_argument("--out", dest="out", default="model.kgem", type=str, help="Default = model.kgem")
    sub_parser.add_argument("--manifest", dest="manifest", default=None, type=str, help="Default = <out>.manifest")
    sub_parser.add_argument("--vocab-dir", dest="vocab_dir", default=None, type=str, help="Also write the vocabulary dumps here.")


def eval_args(sub_parser: ArgumentParser):
    sub_parser.add_argument("--model-file", dest="model_file", required=True, type=str)
    sub_parser.add_argument("--test", dest="test", required=True, type=str)
    sub_parser.add_argument("--train", dest="train", default=None, type=str)
    sub_parser.add_argument("--valid", dest="valid", default=None, type=str)
    sub_parser.add_argument("--filter-splits", dest="filter_splits", default=",".join(SPLITS), type=_csv(str))
    sub_parser.add_argument("--tie-policy", dest="tie_policy", default="pessimistic", choices=("pessimistic", "optimistic"))
    sub_parser.add_argument("--hits-at", dest="hits_at", default="1,3,10", type=_csv(int))
    sub_parser.add_argument("--batch-size", dest="batch_size", default=256, type=int)
    sub_parser.add_argument("--reference", dest="reference", default=None, choices=("wn18", "fb15k"))
    sub_parser.add_argument("--allow-duplicates", dest="allow_duplicates", action="store_true")
    sub_parser.add_argument("--out", dest="out", default=None, type=str, help="key=value report file.")


def spectral_args(sub_parser: ArgumentParser):
    sub_parser.add_argument("matrix_file", type=str, help="File with header 'm k' then k*m rows of m values.")
    sub_parser.add_argument("--tol", dest="tol", default=1e-8, type=float, help="Default = 1e-8")
    sub_parser.add_argument("--num-triples", dest="num_triples", default=1000, type=int)
    sub_parser.add_argument("--num-entities", dest="num_entities", default=50, type=int)
    sub_parser.add_argument("--seed", dest="seed", default=42, type=int)


def bench_args(sub_parser: ArgumentParser):
    sub_parser.add_argument("--train", dest="train", default=None, type=str, help="Default = synthetic planted KG")
    sub_parser.add_argument(
        "--entities", dest="entities", default=200, type=int, help="Entities in the synthetic planted KG. Default = 200"
    )
    sub_parser.add_argument("--model", dest="model", default="analogy", choices=MODEL_KINDS)
    sub_parser.add_argument("--threads", dest="threads", default="1,2,4,8", type=_csv(int))
    sub_parser.add_argument("--dim", dest="dim", default="50,100,200", type=_csv(int))
    sub_parser.add_argument("--epochs", dest="epochs", default=3, type=int)
    sub_parser.add_argument("--neg-ratio", dest="neg_ratio", default=3, type=int)
    sub_parser.add_argument("--batch-size", dest="batch_size", default=1, type=int)
    sub_parser.add_argument("--seed", dest="seed", default=42, type=int)
    sub_parser.add_argument("--plot", dest="plot", default=None, type=str, help="Write run-time plots to this PNG.")
    sub_parser.add_argument("--out", dest="out", default=None, type=str, help="key=value timing file.")


# train flags whose values come from the manifest under --config-from
MANIFEST_FLAGS = (
    "model",
    "dim",
    "scalar_frac",
    "neg_ratio",
    "l2",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "filter_negatives",
    "filter_splits",
    "checkpoint_dir",
    "checkpoint_interval",
    "resume",
    "eval_interval",
    "log_dir",
)


def _train_defaults() -> Namespace:
    parser = ArgumentParser(add_help=False)
    train_args(parser)
    return parser.parse_args(["--train", "-"])


def _overridden_flags(args: Namespace) -> list[str]:
    defaults = _train_defaults()
    return [f"--{name.replace('_', '-')}" for name in MANIFEST_FLAGS if getattr(args, name) != getattr(defaults, name)]


def _train_config(args: Namespace, observer: Observer | None = None) -> TrainConfig:
    if args.data_dir:
        args.train, args.valid, args.test = (str(p) if p else None for p in dataset_paths(args.data_dir))
    if args.config_from:
        ignored = _overridden_flags(args)
        if ignored and observer is not None:
            observer.warn(f"--config-from {args.config_from} supplies the run config; ignoring {', '.join(ignored)}")
        cfg = RunManifest.read(args.config_from).config
        cfg.data = DataConfig(args.train, args.valid, args.test, args.allow_duplicates)
        if args.threads is not None:
            cfg.threads = args.threads
        return cfg
    eval_interval = args.eval_interval if args.eval_interval is not None else (10 if args.valid else 0)
    return TrainConfig(
        model=ModelConfig(model_kind=args.model, dim=args.dim, scalar_frac=args.scalar_frac).resolve_scalars(),
        sampler=SamplerConfig(neg_ratio=args.neg_ratio, filter_false_negatives=args.filter_negatives, seed=args.seed),
        data=DataConfig(args.train, args.valid, args.test, args.allow_duplicates),
        eval=EvalConfig(filter_splits=args.filter_splits),
        lr=args.lr,
        l2=args.l2,
        epochs=args.epochs,
        threads=args.threads if args.threads is not None else _default_threads(),
        batch_size=args.batch_size,
        seed=args.seed,
        checkpoint_interval=args.checkpoint_interval,
        checkpoint_dir=args.checkpoint_dir,
        resume=args.resume,
        eval_interval=eval_interval,
        log_dir=args.log_dir,
    )


def cmd_train(args: Namespace, observer: Observer) -> int:
    cfg = _train_config(args, observer)
    if cfg.log_dir:
        observer.log_dir = Path(cfg.log_dir)
    started = time.perf_counter()
    dataset = load_dataset(cfg.data.train_path, cfg.data.valid_path, cfg.data.test_path, cfg.data.allow_duplicates, observer)
    loaded = time.perf_counter()
    stats = dataset_stats(dataset)
    observer.info(
        f"{stats.num_entities} entities, {stats.num_relations} relations, "
        f"{stats.num_train}/{stats.num_valid}/{stats.num_test} train/valid/test triples"
    )
    dataset_name = Path(cfg.data.train_path).parent.name
    for problem in check_known_stats(dataset_name, stats):
        observer.warn(f"{dataset_name} statistics differ from the published ones: {problem}")

    result = Trainer(cfg, dataset, observer=observer).train()
    trained = time.perf_counter()
    save_model(args.out, result.model, dataset.vocab)
    observer.info(f"Model written to {args.out}")
    if args.vocab_dir:
        save_vocab(dataset.vocab, args.vocab_dir)

    manifest = RunManifest(cfg)
    for name in SPLITS:
        path = getattr(cfg.data, f"{name}_path")
        if path:
            manifest.datasets[name] = str(path)
            manifest.checksums[name] = sha256_of(path)
    if result.epoch_losses:
        manifest.metrics["final_loss"] = result.epoch_losses[-1]
    if len(dataset.test):
        report = evaluate(result.model, dataset.test, dataset.filter_index(cfg.eval.filter_splits), cfg.eval, console=observer.console)
        observer.print_table(report_table(report, title="Test"))
        observer.log_eval_summary(report, "TEST")
        manifest.metrics.update(report.to_flat())
    finished = time.perf_counter()
    manifest.timings = {"load": loaded - started, "train": trained - loaded, "total": finished - started}
    manifest.write(args.manifest or f"{args.out}.manifest")
    observer.close()
    return 0


def cmd_eval(args: Namespace, observer: Observer) -> int:
    cfg = EvalConfig(filter_splits=args.filter_splits, hits_at=args.hits_at, tie_policy=args.tie_policy, batch_size=args.batch_size)
    model, vocab = load_model(args.model_file)
    paths = {"train": args.train, "valid": args.valid, "test": args.test}
    stores = {}
    for name, path in paths.items():
        if path is not None:
            stores[name], _ = load_triples(path, vocab, "frozen", name, args.allow_duplicates, observer)
    for name in cfg.filter_splits:
        if name not in stores:
            observer.warn(f"filter split '{name}' requested but no --{name} file given; skipping it")
    used = [stores[name] for name in cfg.filter_splits if name in stores]
    observer.info(f"Filtering with {', '.join(s.split for s in used) or 'nothing (raw only)'}")
    report = evaluate(model, stores["test"], build_filter_index(used), cfg, console=observer.console)
    observer.print_table(report_table(report))
    observer.log_eval_summary(report)
    if args.reference:
        observer.print_table(reference_table(report, args.reference))
    if args.out:
        write_report(report, args.out)
    return 0


def cmd_verify_spectral(args: Namespace, observer: Observer) -> int:
    family = read_matrix_file(args.matrix_file)
    m = family[0].shape[0]
    generator = torch.Generator().manual_seed(args.seed)
    v = torch.randn(args.num_entities, m, generator=generator, dtype=torch.float64)
    triples = torch.stack(
        [
            torch.randint(0, args.num_entities, (args.num_triples,), generator=generator),
            torch.randint(0, len(family), (args.num_triples,), generator=generator),
            torch.randint(0, args.num_entities, (args.num_triples,), generator=generator),
        ],
        dim=1,
    )
    report = verify_corollary_equivalence(v, family, triples, args.tol, args.seed)
    decomposition = report.decomposition

    table = Table(title="Simultaneous block diagonalization", header_style="bold magenta")
    table.add_column("Check", style="cyan")
    table.add_column("Value", justify="right")
    table.add_row("m / family size", f"{m} / {len(family)}")
    table.add_row("scalar blocks / 2x2 blocks", f"{decomposition.layout.n} / {(m - decomposition.layout.n) // 2}")
    table.add_row("max reconstruction residual", f"{decomposition.max_residual:.3e}")
    table.add_row("block projection residual", f"{decomposition.projection_residual:.3e}")
    table.add_row("orthogonality residual", f"{decomposition.basis.residual:.3e}")
    if decomposition.eigenpairs:
        table.add_row("eigenpair norm deviation", f"{max(d.deviation for d in decomposition.eigenpairs):.3e}")
    table.add_row("max score deviation", f"{report.max_deviation:.3e}")
    observer.print_table(table)
    if not report.passed:
        observer.error(f"score deviation {report.max_deviation:.3e} exceeds tolerance {args.tol:.1e}")
        return 1
    observer.info("[bold green]All residuals within tolerance.[/bold green]")
    return 0


def _bench_dataset(args: Namespace, observer: Observer) -> KGDataset:
    if args.train:
        return load_dataset(args.train, observer=observer)
    return make_synthetic_kg(num_entities=args.entities, seed=args.seed).dataset


def _secs_per_epoch(dataset: KGDataset, args: Namespace, dim: int, threads: int) -> float:
    cfg = TrainConfig(
        model=ModelConfig(model_kind=args.model, dim=dim).resolve_scalars(),
        sampler=SamplerConfig(neg_ratio=args.neg_ratio, seed=args.seed),
        epochs=args.epochs,
        batch_size=args.batch_size,
        threads=threads,
        seed=args.seed,
        checkpoint_interval=0,
    )
    result = Trainer(cfg, dataset, observer=Observer(quiet=True)).train()
    return sum(result.epoch_secs) / len(result.epoch_secs)


def plot_bench(thread_rows: list[tuple[int, float]], dim_rows: list[tuple[int, float]], path: str | Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(12, 5))
    ax1.plot([t for t, _ in thread_rows], [s for _, s in thread_rows], marker="o")
    ax1.set_title("Run time vs workers")
    ax1.set_xlabel("Workers")
    ax1.set_ylabel("Secs / epoch")
    ax2.plot([d for d, _ in dim_rows], [s for _, s in dim_rows], marker="o")
    ax2.set_title("Run time vs embedding size")
    ax2.set_xlabel("Dimension m")
    ax2.set_ylabel("Secs / epoch")
    plt.tight_layout()
    plt.savefig(path)
    plt.close(fig)


def cmd_bench(args: Namespace, observer: Observer) -> int:
    dataset = _bench_dataset(args, observer)
    base_dim, base_threads = args.dim[0], args.threads[0]
    thread_rows = [(t, _secs_per_epoch(dataset, args, base_dim, t)) for t in args.threads]
    dim_rows = [(d, _secs_per_epoch(dataset, args, d, base_threads)) for d in args.dim]

    table = Table(title=f"Secs per epoch on {len(dataset.train)} triples", header_style="bold magenta")
    for column in ("sweep", "workers", "dim", "secs/epoch"):
        table.add_column(column, justify="right")
    for t, secs in thread_rows:
        table.add_row("workers", str(t), str(base_dim), f"{secs:.4f}")
    for d, secs in dim_rows:
        table.add_row("dim", str(base_threads), str(d), f"{secs:.4f}")
    observer.print_table(table)
    if args.out:
        values = {f"threads{t}_dim{base_dim}": s for t, s in thread_rows}
        values.update({f"threads{base_threads}_dim{d}": s for d, s in dim_rows})
        Path(args.out).write_text(format_kv(values), encoding="utf-8")
    if args.plot:
        plot_bench(thread_rows, dim_rows, args.plot)
        observer.info(f"Plots written to {args.plot}")
    return 0


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="analogy-kge", description="Knowledge graph embeddings with commuting normal relation maps.")
    parser.add_argument("--quiet", dest="quiet", action="store_true", help="Only print warnings, errors and tables.")
    subparsers: _SubParsersAction = parser.add_subparsers(dest="command", required=True)
    for name, add_args, handler in (
        ("train", train_args, cmd_train),
        ("eval", eval_args, cmd_eval),
        ("verify-spectral", spectral_args, cmd_verify_spectral),
        ("bench", bench_args, cmd_bench),
    ):
        sub_parser = subparsers.add_parser(name)
        add_args(sub_parser)
        sub_parser.set_defaults(handler=handler)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    observer = Observer(console=Console(), quiet=args.quiet)
    try:
        return args.handler(args, observer)
    except ConfigError as e:
        observer.error(str(e))
        return 2
    except KGError as e:
        observer.error(str(e))
        return 1
    except OSError as e:
        observer.error(f"I/O error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
