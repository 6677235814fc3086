import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import torch
from rich.console import Console
from rich.progress import Progress
from rich.table import Table

from .config import EvalConfig
from .data import FilterIndex, TripleStore
from .errors import DataError
from .model import KGEModel

DIRECTIONS = ("head", "tail")

# published ANALOGY scores, filtered unless the key says raw
PUBLISHED_SCORES: dict[str, dict[str, float]] = {
    "wn18": {"mrr_filt": 0.942, "mrr_raw": 0.657, "hits1_filt": 0.939, "hits3_filt": 0.944, "hits10_filt": 0.947},
    "fb15k": {"mrr_filt": 0.725, "mrr_raw": 0.253, "hits1_filt": 0.646, "hits3_filt": 0.785, "hits10_filt": 0.854},
}


@dataclass(frozen=True)
class RankRecord:
    triple: tuple[int, int, int]
    direction: str
    raw_rank: int
    filtered_rank: int


@dataclass
class MetricReport:
    mrr_raw: float
    mrr_filtered: float
    hits_raw: dict[int, float] = field(default_factory=dict)
    hits_filtered: dict[int, float] = field(default_factory=dict)
    n_queries: int = 0

    @property
    def hits_at(self) -> dict[int, float]:
        return self.hits_filtered

    def to_flat(self) -> dict[str, float]:
        flat = {"mrr_raw": self.mrr_raw, "mrr_filt": self.mrr_filtered}
        for k in sorted(self.hits_raw):
            flat[f"hits{k}_raw"] = self.hits_raw[k]
            flat[f"hits{k}_filt"] = self.hits_filtered[k]
        flat["n_queries"] = float(self.n_queries)
        return flat


def rank_from_scores(
    scores: torch.Tensor,
    truth: torch.Tensor,
    known: torch.Tensor | None = None,
    tie_policy: str = "pessimistic",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Raw and filtered ranks of ``truth`` within each row of ``scores``.

    ``known`` marks candidates removed by the filter; the true candidate is
    never removed. Under the pessimistic policy every other candidate tied
    with the truth counts as ranked above it.
    """
    scores = scores.reshape(-1, scores.shape[-1])
    truth = truth.reshape(-1)
    rows = torch.arange(scores.shape[0])
    target = scores[rows, truth].unsqueeze(1)
    others = torch.ones_like(scores, dtype=torch.bool)
    others[rows, truth] = False
    above = scores > target
    if tie_policy == "pessimistic":
        above |= (scores == target) & others
    keep = others if known is None else others & ~known.reshape(scores.shape)
    raw = 1 + above.sum(1)
    filtered = 1 + (above & keep).sum(1)
    return raw, filtered


def _known_mask(index: FilterIndex | None, keys: list[tuple[int, int]], direction: str, size: int) -> torch.Tensor | None:
    if index is None or not len(index):
        return None
    mask = torch.zeros(len(keys), size, dtype=torch.bool)
    lookup = index.known_tails if direction == "tail" else index.known_heads
    for i, key in enumerate(keys):
        known = lookup.get(key)
        if known:
            mask[i, list(known)] = True
    return mask


@torch.no_grad()
def _rank_chunk(
    model: KGEModel,
    triples: torch.Tensor,
    direction: str,
    index: FilterIndex | None,
    tie_policy: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    s, r, o = triples[:, 0], triples[:, 1], triples[:, 2]
    if direction == "tail":
        scores, truth = model.score_all_tails(s, r), o
        keys = list(zip(s.tolist(), r.tolist()))
    else:
        scores, truth = model.score_all_heads(r, o), s
        keys = list(zip(r.tolist(), o.tolist()))
    return rank_from_scores(scores, truth, _known_mask(index, keys, direction, model.num_entities), tie_policy)


def rank_entities(
    model: KGEModel,
    triple: tuple[int, int, int],
    direction: str,
    filter_index: FilterIndex | None = None,
    tie_policy: str = "pessimistic",
) -> RankRecord:
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    raw, filtered = _rank_chunk(model, torch.tensor([triple], dtype=torch.long), direction, filter_index, tie_policy)
    return RankRecord(tuple(triple), direction, int(raw[0]), int(filtered[0]))


def rank_all(
    model: KGEModel,
    test: TripleStore,
    filter_index: FilterIndex | None = None,
    cfg: EvalConfig | None = None,
    progress: bool = True,
    console: Console | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Raw and filtered ranks for every head and tail query, heads first."""
    cfg = cfg or EvalConfig()
    if not len(test):
        raise DataError(f"cannot evaluate on an empty {test.split} split")
    chunks = test.triples.split(cfg.batch_size)
    raw, filtered = [], []
    with Progress(console=console, transient=True, disable=not progress) as bar:
        task = bar.add_task(f"[cyan]Ranking {test.split}...", total=2 * len(chunks))
        for direction in DIRECTIONS:
            for chunk in chunks:
                r, f = _rank_chunk(model, chunk, direction, filter_index, cfg.tie_policy)
                raw.append(r)
                filtered.append(f)
                bar.update(task, advance=1)
    return torch.cat(raw), torch.cat(filtered)


def metrics_from_ranks(raw: torch.Tensor, filtered: torch.Tensor, hits_at: Iterable[int] = (1, 3, 10)) -> MetricReport:
    raw, filtered = raw.double(), filtered.double()
    ks = sorted(hits_at)
    return MetricReport(
        mrr_raw=float((1.0 / raw).mean()),
        mrr_filtered=float((1.0 / filtered).mean()),
        hits_raw={k: float((raw <= k).double().mean()) for k in ks},
        hits_filtered={k: float((filtered <= k).double().mean()) for k in ks},
        n_queries=raw.numel(),
    )


def evaluate(
    model: KGEModel,
    test: TripleStore,
    filter_index: FilterIndex | None = None,
    cfg: EvalConfig | None = None,
    progress: bool = True,
    console: Console | None = None,
) -> MetricReport:
    cfg = cfg or EvalConfig()
    raw, filtered = rank_all(model, test, filter_index, cfg, progress, console)
    return metrics_from_ranks(raw, filtered, cfg.hits_at)


def proportion_test(p_hat: float, p0: float, num: int) -> tuple[float, bool]:
    """One-sample z test of a proportion against a reference, two-sided at 5%."""
    if not 0.0 < p0 < 1.0:
        raise ValueError(f"reference proportion must lie strictly inside (0, 1), got {p0}")
    if num < 1:
        raise ValueError(f"query count must be >= 1, got {num}")
    z = (p_hat - p0) / math.sqrt(p0 * (1.0 - p0) / num)
    return z, abs(z) > 1.96


def report_table(report: MetricReport, title: str = "Link prediction") -> Table:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    table.add_column("Metric", style="cyan")
    table.add_column("Raw", justify="right")
    table.add_column("Filtered", justify="right", style="green")
    table.add_row("MRR", f"{report.mrr_raw:.4f}", f"{report.mrr_filtered:.4f}")
    for k in sorted(report.hits_filtered):
        table.add_row(f"Hits@{k}", f"{report.hits_raw[k]:.4f}", f"{report.hits_filtered[k]:.4f}")
    table.add_row("Queries", str(report.n_queries), str(report.n_queries))
    return table


def reference_table(report: MetricReport, dataset: str) -> Table | None:
    reference = PUBLISHED_SCORES.get(dataset.lower())
    if reference is None:
        return None
    flat = report.to_flat()
    table = Table(title=f"Against published {dataset.upper()} scores", header_style="bold magenta")
    for column in ("Metric", "Ours", "Published", "z", "Significant"):
        table.add_column(column, justify="right" if column != "Metric" else "left")
    for key, published in reference.items():
        if key not in flat:
            continue
        z, significant = ("", "")
        # proportion tests only apply to Hits@k
        if key.startswith("hits"):
            z_value, flag = proportion_test(flat[key], published, report.n_queries)
            z, significant = f"{z_value:+.2f}", "yes" if flag else "no"
        table.add_row(key, f"{flat[key]:.4f}", f"{published:.4f}", z, significant)
    return table


def format_kv(values: dict[str, float | int | str]) -> str:
    def fmt(v):
        return repr(v) if isinstance(v, float) else str(v)

    return "".join(f"{key}={fmt(value)}\n" for key, value in values.items())


def parse_kv(text: str) -> dict[str, str]:
    """Read ``key=value`` pairs, one per line or several per line."""
    out: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        # a line whose every token has '=' holds several pairs; otherwise the value may contain spaces
        pairs = tokens if all("=" in t for t in tokens) else [line.strip()]
        for token in pairs:
            key, sep, value = token.partition("=")
            if not sep or not key:
                raise DataError(f"line {line_no}: malformed key=value entry {token!r}")
            out[key] = value
    return out


def write_report(report: MetricReport, path: str | Path):
    flat: dict[str, float | int | str] = dict(report.to_flat())
    flat["n_queries"] = report.n_queries
    Path(path).write_text(format_kv(flat), encoding="utf-8")


def read_report(path: str | Path) -> MetricReport:
    values = parse_kv(Path(path).read_text(encoding="utf-8"))
    ks = sorted(int(key[4:-4]) for key in values if key.startswith("hits") and key.endswith("_raw"))
    return MetricReport(
        mrr_raw=float(values["mrr_raw"]),
        mrr_filtered=float(values["mrr_filt"]),
        hits_raw={k: float(values[f"hits{k}_raw"]) for k in ks},
        hits_filtered={k: float(values[f"hits{k}_filt"]) for k in ks},
        n_queries=int(values["n_queries"]),
    )
