import threading
import time
from dataclasses import dataclass, field
from queue import Empty

import numpy as np
import torch
import torch.multiprocessing as mp
import torch.nn.functional as F

from .checkpoint import load_latest_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import FilterIndex, KGDataset
from .errors import ConfigError, KGError, TrainingDivergedError
from .evaluation import evaluate
from .kernels import DIVERGED_DETAIL, KIND_CODES, OK, adagrad_pass, warm_up
from .model import KGEModel, TripleGradient
from .observer import Observer
from .sampler import epoch_samples, worker_generator

READY = -1
WORKER_POLL_SECS = 5.0
BARRIER_TIMEOUT_SECS = 60.0


def logistic_loss(phi, y):
    """-log sigmoid(y * phi), evaluated as softplus(-y * phi)."""
    if isinstance(phi, torch.Tensor) or isinstance(y, torch.Tensor):
        return F.softplus(-torch.as_tensor(y, dtype=torch.float64) * torch.as_tensor(phi, dtype=torch.float64))
    return float(F.softplus(torch.tensor(-float(y) * float(phi), dtype=torch.float64)))


def loss_grad_scale(phi, y):
    """d loss / d phi = -y * sigmoid(-y * phi)."""
    if isinstance(phi, torch.Tensor) or isinstance(y, torch.Tensor):
        y_t = torch.as_tensor(y, dtype=torch.float64)
        return -y_t * torch.sigmoid(-y_t * torch.as_tensor(phi, dtype=torch.float64))
    return float(-float(y) * torch.sigmoid(torch.tensor(-float(y) * float(phi), dtype=torch.float64)))


@dataclass
class AdaGradState:
    entity_sum: torch.Tensor
    relation_sum: torch.Tensor

    @classmethod
    def zeros_like(cls, model: KGEModel) -> "AdaGradState":
        return cls(torch.zeros_like(model.entity.data), torch.zeros_like(model.relation.data))

    def share_memory_(self) -> "AdaGradState":
        self.entity_sum.share_memory_()
        self.relation_sum.share_memory_()
        return self


def _accumulate(rows: torch.Tensor, grads: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    unique, inverse = torch.unique(rows, return_inverse=True)
    total = grads.new_zeros(unique.shape[0], grads.shape[1]).index_add_(0, inverse, grads)
    return unique, total


def _adagrad_rows(
    table: torch.Tensor,
    sums: torch.Tensor,
    rows: torch.Tensor,
    grad: torch.Tensor,
    lr: float,
    l2: float,
    eps: float,
):
    if l2:
        grad = grad + l2 * table[rows]
    delta = grad * grad
    # other workers may bump the shared sums concurrently; the local copy keeps local >= g^2
    local = sums[rows] + delta
    sums.index_add_(0, rows, delta)
    table.index_add_(0, rows, -lr * grad / (local.sqrt() + eps))


@torch.no_grad()
def sgd_update(
    model: KGEModel,
    state: AdaGradState,
    triples: torch.Tensor,
    grad: TripleGradient,
    loss_scale: torch.Tensor,
    cfg: TrainConfig,
    epoch: int = -1,
):
    scale = torch.as_tensor(loss_scale, dtype=torch.float64).reshape(-1, 1)
    triples = triples.reshape(-1, 3)
    entity_rows = torch.cat([triples[:, 0], triples[:, 2]])
    entity_grads = torch.cat([scale * grad.d_subject.reshape(-1, model.config.dim), scale * grad.d_object.reshape(-1, model.config.dim)])
    relation_grads = scale * grad.d_relation.reshape(-1, model.config.dim)
    if not (torch.isfinite(entity_grads).all() and torch.isfinite(relation_grads).all()):
        raise TrainingDivergedError(epoch, "gradient")

    rows, g = _accumulate(entity_rows, entity_grads)
    _adagrad_rows(model.entity.data, state.entity_sum, rows, g, cfg.lr, cfg.l2, cfg.adagrad_epsilon)
    rows, g = _accumulate(triples[:, 1], relation_grads)
    _adagrad_rows(model.relation.data, state.relation_sum, rows, g, cfg.lr, cfg.l2, cfg.adagrad_epsilon)


def _run_kernel(
    model: KGEModel,
    state: AdaGradState,
    samples: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    epoch: int,
) -> tuple[float, int]:
    loss_sum, status, _ = adagrad_pass(
        KIND_CODES[model.kind],
        model.n,
        model.entity.data.numpy(),
        model.relation.data.numpy(),
        state.entity_sum.numpy(),
        state.relation_sum.numpy(),
        np.ascontiguousarray(samples.numpy(), dtype=np.int64),
        np.ascontiguousarray(labels.numpy(), dtype=np.float64),
        cfg.lr,
        cfg.l2,
        cfg.adagrad_epsilon,
    )
    if status != OK:
        raise TrainingDivergedError(epoch, DIVERGED_DETAIL[status])
    return loss_sum, samples.shape[0]


@torch.no_grad()
def run_samples(
    model: KGEModel,
    state: AdaGradState,
    samples: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    epoch: int,
) -> tuple[float, int]:
    if cfg.batch_size == 1:
        return _run_kernel(model, state, samples, labels, cfg, epoch)
    loss_sum = 0.0
    for start in range(0, samples.shape[0], cfg.batch_size):
        batch, y = samples[start : start + cfg.batch_size], labels[start : start + cfg.batch_size]
        phi = model.score(batch)
        loss = logistic_loss(phi, y).sum()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(epoch, "loss")
        loss_sum += float(loss)
        sgd_update(model, state, batch, model.grad(batch), loss_grad_scale(phi, y), cfg, epoch)
    return loss_sum, samples.shape[0]


def _hogwild_worker(
    worker_id: int,
    model: KGEModel,
    state: AdaGradState,
    shard: torch.Tensor,
    cfg: TrainConfig,
    filter_index: FilterIndex | None,
    start_epoch: int,
    queue,
    barrier,
):
    torch.set_num_threads(1)
    if cfg.batch_size == 1:
        warm_up()
    queue.put((worker_id, READY, 0.0, 0, None))
    try:
        barrier.wait()
    except threading.BrokenBarrierError:
        return
    generator = worker_generator(cfg.seed, worker_id)
    for epoch in range(start_epoch, cfg.epochs):
        try:
            if shard.shape[0]:
                samples, labels = epoch_samples(
                    shard, cfg.sampler, model.num_entities, model.num_relations, generator, filter_index
                )
                loss_sum, count = run_samples(model, state, samples, labels, cfg, epoch)
            else:
                loss_sum, count = 0.0, 0
        except Exception as e:
            queue.put((worker_id, epoch, 0.0, 0, str(e)))
            return
        queue.put((worker_id, epoch, loss_sum, count, None))
        try:
            barrier.wait()
        except threading.BrokenBarrierError:
            return


def gather_reports(queue, workers, count: int, poll_secs: float = WORKER_POLL_SECS) -> list[tuple]:
    """Next ``count`` worker reports; fails once a worker has died without reporting."""
    reports: list[tuple] = []
    while len(reports) < count:
        try:
            reports.append(queue.get(timeout=poll_secs))
        except Empty:
            dead = [w for w in workers if not w.is_alive()]
            if dead:
                codes = ", ".join(f"pid {w.pid} exit code {w.exitcode}" for w in dead)
                raise KGError(f"worker process exited without reporting ({codes})") from None
    return reports


@dataclass
class TrainResult:
    model: KGEModel
    state: AdaGradState
    epoch_losses: list[float] = field(default_factory=list)
    epoch_secs: list[float] = field(default_factory=list)
    valid_mrr: dict[int, float] = field(default_factory=dict)


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        dataset: KGDataset,
        model: KGEModel | None = None,
        observer: Observer | None = None,
    ):
        self.config = config
        self.dataset = dataset
        self.observer = observer or Observer(log_dir=config.log_dir)
        vocab = dataset.vocab
        if len(dataset.train) == 0:
            raise ConfigError("training split is empty")
        self.model = model or KGEModel(config.model, vocab.num_entities, vocab.num_relations, seed=config.seed)
        if (self.model.num_entities, self.model.num_relations) != (vocab.num_entities, vocab.num_relations):
            raise ConfigError(
                f"model tables ({self.model.num_entities}, {self.model.num_relations}) do not match "
                f"vocabulary ({vocab.num_entities}, {vocab.num_relations})"
            )
        self.state = AdaGradState.zeros_like(self.model)
        self.start_epoch = 0
        self.sampler_filter = dataset.filter_index(("train",)) if config.sampler.filter_false_negatives else None
        self._valid_filter: FilterIndex | None = None
        self.result = TrainResult(self.model, self.state)

    def _load_checkpoint(self):
        if not (self.config.resume and self.config.checkpoint_dir):
            return
        loaded = load_latest_checkpoint(self.config.checkpoint_dir, self.observer)
        if loaded is None:
            self.observer.warn("No checkpoint found.")
            return
        model, vocab, trainer_state = loaded
        mismatch = vocab.first_mismatch(self.dataset.vocab)
        if mismatch or model.kind != self.model.kind or model.entity.shape != self.model.entity.shape:
            self.observer.warn(f"Checkpoint does not match the current run ({mismatch or 'model shape'}), starting fresh.")
            return
        self.model.entity.data.copy_(model.entity.data)
        self.model.relation.data.copy_(model.relation.data)
        self.state.entity_sum.copy_(trainer_state.entity_sum)
        self.state.relation_sum.copy_(trainer_state.relation_sum)
        self.start_epoch = trainer_state.epoch
        self.observer.info(f"[bold green]Resumed from checkpoint at epoch {self.start_epoch}.[/bold green]")

    def _save_checkpoint(self, epoch: int):
        save_checkpoint(
            self.config.checkpoint_dir,
            epoch,
            self.model,
            self.dataset.vocab,
            self.state.entity_sum,
            self.state.relation_sum,
            self.config.max_checkpoints,
            self.observer,
        )

    def _end_of_epoch(self, epoch: int, loss_sum: float, count: int, secs: float):
        mean = loss_sum / max(count, 1)
        self.result.epoch_losses.append(mean)
        self.result.epoch_secs.append(secs)
        self.observer.log_epoch(epoch, mean, secs)
        done = epoch + 1
        if self.config.checkpoint_dir and (
            done == self.config.epochs or (self.config.checkpoint_interval and done % self.config.checkpoint_interval == 0)
        ):
            self._save_checkpoint(done)
        if self.config.eval_interval and len(self.dataset.valid) and done % self.config.eval_interval == 0:
            if self._valid_filter is None:
                self._valid_filter = self.dataset.filter_index(("train", "valid"))
            report = evaluate(self.model, self.dataset.valid, self._valid_filter, self.config.eval, progress=False)
            self.result.valid_mrr[done] = report.mrr_filtered
            self.observer.log_validation(done, report)

    def _train_single(self):
        generator = worker_generator(self.config.seed, 0)
        train = self.dataset.train.triples
        if self.config.batch_size == 1:
            warm_up()
        for epoch in range(self.start_epoch, self.config.epochs):
            start = time.perf_counter()
            samples, labels = epoch_samples(
                train, self.config.sampler, self.model.num_entities, self.model.num_relations, generator, self.sampler_filter
            )
            loss_sum, count = run_samples(self.model, self.state, samples, labels, self.config, epoch)
            self._end_of_epoch(epoch, loss_sum, count, time.perf_counter() - start)

    def _train_hogwild(self):
        threads = self.config.threads
        ctx = mp.get_context("spawn")
        self.model.share_memory()
        self.state.share_memory_()
        queue, barrier = ctx.Queue(), ctx.Barrier(threads + 1)
        shards = self.dataset.train.triples.tensor_split(threads)
        workers = [
            ctx.Process(
                target=_hogwild_worker,
                args=(wid, self.model, self.state, shards[wid], self.config, self.sampler_filter, self.start_epoch, queue, barrier),
                daemon=True,
            )
            for wid in range(threads)
        ]
        for w in workers:
            w.start()
        try:
            # workers report ready once started and compiled; the clock starts after that
            gather_reports(queue, workers, threads)
            barrier.wait(timeout=BARRIER_TIMEOUT_SECS)
            start = time.perf_counter()
            for epoch in range(self.start_epoch, self.config.epochs):
                loss_sum, count, failures = 0.0, 0, []
                for _, _, worker_loss, worker_count, error in gather_reports(queue, workers, threads):
                    if error is not None:
                        failures.append(error)
                    loss_sum += worker_loss
                    count += worker_count
                if failures:
                    raise KGError(f"epoch {epoch}: worker failure: {'; '.join(failures)}")
                self._end_of_epoch(epoch, loss_sum, count, time.perf_counter() - start)
                barrier.wait(timeout=BARRIER_TIMEOUT_SECS)
                start = time.perf_counter()
        except threading.BrokenBarrierError:
            barrier.abort()
            raise KGError("worker processes stopped responding at the epoch barrier") from None
        except BaseException:
            barrier.abort()
            raise
        finally:
            for w in workers:
                w.join(timeout=10)
                if w.is_alive():
                    w.terminate()

    def train(self) -> TrainResult:
        self._load_checkpoint()
        cfg = self.config
        self.observer.info(
            f"[bold green]Training {cfg.model.model_kind} m={cfg.model.dim} n={self.model.n} "
            f"on {len(self.dataset.train)} triples with {cfg.threads} worker(s)[/bold green]"
        )
        if cfg.threads == 1:
            self._train_single()
        else:
            self._train_hogwild()
        self.observer.info("[bold green]Training Finished.[/bold green]")
        return self.result


def train(dataset: KGDataset, model: KGEModel | None, cfg: TrainConfig, observer: Observer | None = None) -> TrainResult:
    return Trainer(cfg, dataset, model, observer).train()
