from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from .errors import DataError, DuplicateTripleError, TripleParseError, VocabularyError
from .observer import Observer

VocabMode = Literal["build", "frozen"]

# triples pack into one int64 key: subject << 40 | relation << 24 | object
_SUBJECT_SHIFT, _RELATION_SHIFT = 40, 24
_MAX_ENTITIES, _MAX_RELATIONS = 1 << 23, 1 << 16

ENTITY_DUMP, RELATION_DUMP = "entities.tsv", "relations.tsv"


@dataclass
class Vocab:
    entity_names: list[str] = field(default_factory=list)
    relation_names: list[str] = field(default_factory=list)
    entity_index: dict[str, int] = field(default_factory=dict)
    relation_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.entity_index:
            self.entity_index = {name: i for i, name in enumerate(self.entity_names)}
        if not self.relation_index:
            self.relation_index = {name: i for i, name in enumerate(self.relation_names)}
        if len(self.entity_index) != len(self.entity_names):
            raise DataError("duplicate entity names in vocabulary")
        if len(self.relation_index) != len(self.relation_names):
            raise DataError("duplicate relation names in vocabulary")

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def copy(self) -> "Vocab":
        return Vocab(list(self.entity_names), list(self.relation_names), dict(self.entity_index), dict(self.relation_index))

    def add_entity(self, name: str) -> int:
        idx = self.entity_index.get(name)
        if idx is None:
            idx = self.entity_index[name] = len(self.entity_names)
            self.entity_names.append(name)
        return idx

    def add_relation(self, name: str) -> int:
        idx = self.relation_index.get(name)
        if idx is None:
            idx = self.relation_index[name] = len(self.relation_names)
            self.relation_names.append(name)
        return idx

    def entity_id(self, name: str) -> int:
        try:
            return self.entity_index[name]
        except KeyError:
            raise VocabularyError(name, "entity") from None

    def relation_id(self, name: str) -> int:
        try:
            return self.relation_index[name]
        except KeyError:
            raise VocabularyError(name, "relation") from None

    def entity_name(self, idx: int) -> str:
        return self.entity_names[idx]

    def relation_name(self, idx: int) -> str:
        return self.relation_names[idx]

    def first_mismatch(self, other: "Vocab") -> str | None:
        for kind, mine, theirs in (
            ("entity", self.entity_names, other.entity_names),
            ("relation", self.relation_names, other.relation_names),
        ):
            for i, (a, b) in enumerate(zip(mine, theirs)):
                if a != b:
                    return f"{kind} {i}: {a!r} != {b!r}"
            if len(mine) != len(theirs):
                extra = (mine if len(mine) > len(theirs) else theirs)[min(len(mine), len(theirs))]
                return f"{kind} {extra!r} present on one side only"
        return None


def encode_keys(triples: torch.Tensor) -> torch.Tensor:
    if triples.numel() == 0:
        return torch.empty(0, dtype=torch.long)
    t = triples.long()
    if int(t[:, [0, 2]].max()) >= _MAX_ENTITIES or int(t[:, 1].max()) >= _MAX_RELATIONS:
        raise DataError("vocabulary too large for packed triple keys")
    return (t[:, 0] << _SUBJECT_SHIFT) | (t[:, 1] << _RELATION_SHIFT) | t[:, 2]


@dataclass
class TripleStore:
    triples: torch.Tensor
    split: str = "train"

    def __post_init__(self):
        self.triples = torch.as_tensor(self.triples, dtype=torch.long).reshape(-1, 3).contiguous()
        if self.triples.numel() and int(self.triples.min()) < 0:
            raise DataError(f"negative index in {self.split} split")
        keys = encode_keys(self.triples)
        if keys.numel() != torch.unique(keys).numel():
            raise DataError(f"duplicate triples in {self.split} split")

    def __len__(self) -> int:
        return self.triples.shape[0]

    def keys(self) -> torch.Tensor:
        return encode_keys(self.triples)

    def as_tuples(self) -> list[tuple[int, int, int]]:
        return [tuple(t) for t in self.triples.tolist()]


@dataclass
class FilterIndex:
    known_tails: dict[tuple[int, int], set[int]] = field(default_factory=dict)
    known_heads: dict[tuple[int, int], set[int]] = field(default_factory=dict)
    source_splits: tuple[str, ...] = ()
    sorted_keys: torch.Tensor = field(default_factory=lambda: torch.empty(0, dtype=torch.long))

    def __len__(self) -> int:
        return self.sorted_keys.numel()

    def __contains__(self, triple: tuple[int, int, int]) -> bool:
        s, r, o = triple
        return o in self.known_tails.get((s, r), ())

    def contains(self, triples: torch.Tensor) -> torch.Tensor:
        if not len(self) or triples.numel() == 0:
            return torch.zeros(triples.reshape(-1, 3).shape[0], dtype=torch.bool)
        return torch.isin(encode_keys(triples.reshape(-1, 3)), self.sorted_keys)

    def tails(self, s: int, r: int) -> set[int]:
        return self.known_tails.get((s, r), set())

    def heads(self, r: int, o: int) -> set[int]:
        return self.known_heads.get((r, o), set())


def build_filter_index(stores: Sequence[TripleStore]) -> FilterIndex:
    index = FilterIndex(source_splits=tuple(store.split for store in stores))
    all_keys = []
    for store in stores:
        for s, r, o in store.triples.tolist():
            index.known_tails.setdefault((s, r), set()).add(o)
            index.known_heads.setdefault((r, o), set()).add(s)
        all_keys.append(store.keys())
    if all_keys:
        index.sorted_keys = torch.unique(torch.cat(all_keys))
    return index


def load_triples(
    path: str | Path,
    vocab: Vocab | None = None,
    mode: VocabMode = "build",
    split: str = "train",
    allow_duplicates: bool = False,
    observer: Observer | None = None,
) -> tuple[TripleStore, Vocab]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"triple file not found: {path}")
    vocab = Vocab() if vocab is None else vocab
    out_vocab = vocab.copy() if mode == "build" else vocab

    rows: list[tuple[int, int, int]] = []
    first_seen: dict[tuple[int, int, int], int] = {}
    duplicate_lines: list[int] = []

    with open(path, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TripleParseError(path, line_no, f"expected 3 tab-separated fields, got {len(parts)}")
            if not all(parts):
                raise TripleParseError(path, line_no, "empty field")
            s_name, r_name, o_name = parts
            if mode == "build":
                triple = (out_vocab.add_entity(s_name), out_vocab.add_relation(r_name), out_vocab.add_entity(o_name))
            else:
                try:
                    triple = (out_vocab.entity_id(s_name), out_vocab.relation_id(r_name), out_vocab.entity_id(o_name))
                except VocabularyError as e:
                    raise VocabularyError(e.name, e.kind, f"{path}:{line_no}") from None
            if triple in first_seen:
                duplicate_lines.append(line_no)
                continue
            first_seen[triple] = line_no
            rows.append(triple)

    if duplicate_lines:
        if not allow_duplicates:
            raise DuplicateTripleError(path, duplicate_lines)
        if observer is not None:
            observer.warn(f"{path}: dropped {len(duplicate_lines)} duplicate triple(s), first on line {duplicate_lines[0]}")

    store = TripleStore(torch.tensor(rows, dtype=torch.long).reshape(-1, 3), split=split)
    return store, out_vocab


def dump_names(names: Iterable[str]) -> str:
    return "".join(f"{i}\t{name}\n" for i, name in enumerate(names))


def parse_names(text: str, source: str = "<vocab>") -> list[str]:
    names: list[str] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        idx, sep, name = line.partition("\t")
        if not sep or not idx.isdigit() or not name:
            raise TripleParseError(source, line_no, "expected '<index>\\t<name>'")
        if int(idx) != len(names):
            raise TripleParseError(source, line_no, f"index {idx} out of order, expected {len(names)}")
        names.append(name)
    return names


def save_vocab(vocab: Vocab, directory: str | Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / ENTITY_DUMP).write_text(dump_names(vocab.entity_names), encoding="utf-8")
    (directory / RELATION_DUMP).write_text(dump_names(vocab.relation_names), encoding="utf-8")


def load_vocab(directory: str | Path) -> Vocab:
    directory = Path(directory)
    entities = parse_names((directory / ENTITY_DUMP).read_text(encoding="utf-8"), str(directory / ENTITY_DUMP))
    relations = parse_names((directory / RELATION_DUMP).read_text(encoding="utf-8"), str(directory / RELATION_DUMP))
    return Vocab(entities, relations)


@dataclass
class KGDataset:
    vocab: Vocab
    train: TripleStore
    valid: TripleStore = field(default_factory=lambda: TripleStore(torch.empty(0, 3, dtype=torch.long), "valid"))
    test: TripleStore = field(default_factory=lambda: TripleStore(torch.empty(0, 3, dtype=torch.long), "test"))

    def split(self, name: str) -> TripleStore:
        if name not in ("train", "valid", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    def filter_index(self, splits: Sequence[str] = ("train", "valid", "test")) -> FilterIndex:
        return build_filter_index([self.split(name) for name in splits])


def load_dataset(
    train_path: str | Path,
    valid_path: str | Path | None = None,
    test_path: str | Path | None = None,
    allow_duplicates: bool = False,
    observer: Observer | None = None,
) -> KGDataset:
    train, vocab = load_triples(train_path, None, "build", "train", allow_duplicates, observer)
    dataset = KGDataset(vocab, train)
    for name, path in (("valid", valid_path), ("test", test_path)):
        if path is not None:
            store, _ = load_triples(path, vocab, "frozen", name, allow_duplicates, observer)
            setattr(dataset, name, store)
    return dataset


def dataset_paths(directory: str | Path) -> tuple[Path, Path | None, Path | None]:
    """``train.txt`` plus whichever of ``valid.txt`` / ``test.txt`` exist."""
    directory = Path(directory)
    optional = [directory / f"{name}.txt" for name in ("valid", "test")]
    valid, test = (p if p.is_file() else None for p in optional)
    return directory / "train.txt", valid, test


def load_dataset_dir(directory: str | Path, allow_duplicates: bool = False, observer: Observer | None = None) -> KGDataset:
    return load_dataset(*dataset_paths(directory), allow_duplicates, observer)


@dataclass(frozen=True)
class DatasetStats:
    num_entities: int
    num_relations: int
    num_train: int
    num_valid: int
    num_test: int


KNOWN_STATS: dict[str, DatasetStats] = {
    "fb15k": DatasetStats(14_951, 1_345, 483_142, 50_000, 59_071),
    "wn18": DatasetStats(40_943, 18, 141_442, 5_000, 5_000),
}


def dataset_stats(dataset: KGDataset) -> DatasetStats:
    return DatasetStats(
        dataset.vocab.num_entities,
        dataset.vocab.num_relations,
        len(dataset.train),
        len(dataset.valid),
        len(dataset.test),
    )


def check_known_stats(name: str, stats: DatasetStats) -> list[str]:
    expected = KNOWN_STATS.get(name.lower())
    if expected is None:
        return []
    return [
        f"{key}: expected {getattr(expected, key)}, found {getattr(stats, key)}"
        for key in DatasetStats.__dataclass_fields__
        if getattr(expected, key) != getattr(stats, key)
    ]


@dataclass
class PlantedKG:
    dataset: KGDataset
    entity_vectors: torch.Tensor
    relation_params: torch.Tensor
    num_scalars: int


def make_synthetic_kg(
    num_entities: int = 200,
    num_relations: int = 4,
    dim: int = 16,
    num_scalars: int = 8,
    tails_per_query: int = 3,
    holdout: float = 0.1,
    asymmetric: bool = True,
    seed: int = 0,
) -> PlantedKG:
    from .model import score_analogy

    if (dim - num_scalars) % 2 or not 0 <= num_scalars <= dim:
        raise DataError(f"planted layout needs m - n even, got m={dim}, n={num_scalars}")
    rng = np.random.default_rng(seed)
    entities = torch.from_numpy(rng.standard_normal((num_entities, dim)) / np.sqrt(dim))

    num_pairs = (dim - num_scalars) // 2
    scalars = rng.normal(0.0, 0.3 if asymmetric else 1.0, (num_relations, num_scalars))
    x = rng.normal(0.0, 0.3 if asymmetric else 1.0, (num_relations, num_pairs))
    if asymmetric:
        y = rng.choice([-1.0, 1.0], (num_relations, num_pairs)) * rng.uniform(1.0, 2.0, (num_relations, num_pairs))
    else:
        y = np.zeros((num_relations, num_pairs))
    pairs = np.stack([x, y], axis=-1).reshape(num_relations, 2 * num_pairs)
    relations = torch.from_numpy(np.concatenate([scalars, pairs], axis=1))

    rows = []
    for r in range(num_relations):
        for s in range(num_entities):
            scores = score_analogy(entities[s].expand(num_entities, dim), relations[r].expand(num_entities, dim), entities, num_scalars)
            scores[s] = -torch.inf
            for o in torch.topk(scores, tails_per_query).indices.tolist():
                rows.append((s, r, o))

    triples = torch.tensor(rows, dtype=torch.long)
    perm = torch.from_numpy(rng.permutation(len(rows)))
    num_held = int(round(holdout * len(rows)))
    held, kept = triples[perm[:num_held]], triples[perm[num_held:]]

    vocab = Vocab([f"e{i}" for i in range(num_entities)], [f"r{i}" for i in range(num_relations)])
    dataset = KGDataset(vocab, TripleStore(kept, "train"), test=TripleStore(held, "test"))
    return PlantedKG(dataset, entities, relations, num_scalars)
