from collections.abc import Iterator
from dataclasses import dataclass, replace

import numpy as np
import torch

from .config import SamplerConfig
from .data import FilterIndex, TripleStore
from .errors import SamplerError

SLOT = {"subject": 0, "relation": 1, "object": 2}


@dataclass(frozen=True)
class LabeledTriple:
    s: int
    r: int
    o: int
    y: int = 1

    def __post_init__(self):
        if self.y not in (1, -1):
            raise ValueError(f"label must be +1 or -1, got {self.y}")


def worker_generator(seed: int, worker_id: int = 0) -> torch.Generator:
    state = np.random.SeedSequence([seed, worker_id]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state) & ((1 << 63) - 1))


def _draw_excluding(original: torch.Tensor, size: int, generator: torch.Generator) -> torch.Tensor:
    # uniform over the other size - 1 indices
    draws = torch.randint(0, size - 1, original.shape, generator=generator)
    return draws + (draws >= original).long()


def _slot_size(slot: int, num_entities: int, num_relations: int) -> int:
    size = num_relations if slot == 1 else num_entities
    if size < 2:
        name = "relation" if slot == 1 else "entity"
        raise SamplerError(f"cannot corrupt the {name} slot of a vocabulary with {size} {name}(s)")
    return size


def corrupt(
    positive: LabeledTriple,
    mode: str,
    rng: torch.Generator,
    num_entities: int,
    num_relations: int,
) -> LabeledTriple:
    if positive.y != 1:
        raise SamplerError("only positive triples can be corrupted")
    slot = SLOT[mode]
    size = _slot_size(slot, num_entities, num_relations)
    original = (positive.s, positive.r, positive.o)[slot]
    value = int(_draw_excluding(torch.tensor([original]), size, rng)[0])
    field_name = ("s", "r", "o")[slot]
    return replace(positive, **{field_name: value, "y": -1})


def epoch_samples(
    triples: torch.Tensor,
    cfg: SamplerConfig,
    num_entities: int,
    num_relations: int,
    generator: torch.Generator,
    filter_index: FilterIndex | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One pass of the training distribution: each positive (in a fresh random
    order) followed by ``neg_ratio`` corruptions, modes cycling round-robin."""
    num_pos, alpha = triples.shape[0], cfg.neg_ratio
    if num_pos == 0:
        raise SamplerError("cannot sample from an empty triple store")
    positives = triples[torch.randperm(num_pos, generator=generator)]
    negatives = positives.repeat_interleave(alpha, dim=0)
    # the mode cycle runs on across positives: negative j of positive i takes mode (i * alpha + j) mod |modes|
    codes = torch.tensor([SLOT[mode] for mode in cfg.corrupt_modes])
    slots = codes[torch.arange(num_pos * alpha) % len(codes)]

    for slot in sorted(set(slots.tolist())):
        size = _slot_size(slot, num_entities, num_relations)
        rows = (slots == slot).nonzero().squeeze(1)
        negatives[rows, slot] = _draw_excluding(negatives[rows, slot], size, generator)

    if cfg.filter_false_negatives and filter_index is not None and len(filter_index):
        originals = positives.repeat_interleave(alpha, dim=0)
        for _ in range(cfg.max_filter_redraws):
            bad = filter_index.contains(negatives).nonzero().squeeze(1)
            if bad.numel() == 0:
                break
            for slot in sorted(set(slots[bad].tolist())):
                rows = bad[slots[bad] == slot]
                size = _slot_size(slot, num_entities, num_relations)
                negatives[rows, slot] = _draw_excluding(originals[rows, slot], size, generator)
        else:
            if filter_index.contains(negatives).any():
                raise SamplerError(f"could not draw true negatives within {cfg.max_filter_redraws} redraws")

    samples = torch.cat([positives[:, None, :], negatives.view(num_pos, alpha, 3)], dim=1).reshape(-1, 3)
    labels = torch.tensor([1.0] + [-1.0] * alpha, dtype=torch.float64).repeat(num_pos)
    return samples, labels


def batch_stream(
    store: TripleStore,
    cfg: SamplerConfig,
    num_entities: int,
    num_relations: int,
    rng: torch.Generator | None = None,
    filter_index: FilterIndex | None = None,
    epochs: int = 1,
) -> Iterator[LabeledTriple]:
    if not len(store):
        raise SamplerError("cannot sample from an empty triple store")
    rng = rng if rng is not None else worker_generator(cfg.seed)
    for _ in range(epochs):
        samples, labels = epoch_samples(store.triples, cfg, num_entities, num_relations, rng, filter_index)
        for (s, r, o), y in zip(samples.tolist(), labels.tolist()):
            yield LabeledTriple(s, r, o, int(y))
