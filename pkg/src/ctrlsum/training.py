"""Optimization recipe: Nesterov momentum with lookahead gradients,
global-norm gradient clipping, plateau-triggered learning-rate decay and
a deterministic per-sequence training loop.

Batches are token-count-bounded groups of length-sorted sequences; the
"batch" gradient is the per-token mean accumulated over its sequences,
so no padding ever enters the loss.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .autodiff import Tape, backward, scale
from .model import ConvSeq2Seq


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def clip_gradients(grads, clip_norm: float | None):
    """Scale the gradient set so its global L2 norm is at most clip_norm.

    Returns (scaled grads, original global norm). Norms at or below the
    threshold pass through unchanged; a non-finite norm raises.
    """
    arrs = list(grads)
    total = math.sqrt(sum(float(np.sum(g * g)) for g in arrs))
    if not math.isfinite(total):
        raise FloatingPointError(f"non-finite gradient norm {total}")
    if clip_norm is not None and total > clip_norm:
        s = clip_norm / total
        arrs = [g * s for g in arrs]
    return arrs, total


class NesterovOptimizer:
    """Nesterov accelerated gradient in the lookahead formulation:

        v <- mu * v - lr * grad(theta + mu * v)
        theta <- theta + v

    ``step`` moves the parameters to the lookahead point, asks ``grad_fn``
    for gradients there, then commits the update. Gradients are clipped
    jointly to ``clip_norm`` before the velocity update.
    """

    def __init__(self, params: dict, lr: float = 0.2, momentum: float = 0.99,
                 clip_norm: float | None = 0.1):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grad_fn) -> float:
        names = list(self.params)
        thetas = {n: self.params[n].data.copy() for n in names}
        for n in names:
            self.params[n].data += self.momentum * self.velocity[n]
        try:
            grads = grad_fn()
            clipped, norm = clip_gradients([grads[n] for n in names],
                                           self.clip_norm)
        except Exception:
            for n in names:  # leave parameters where they were
                self.params[n].data[...] = thetas[n]
            raise
        for n, g in zip(names, clipped):
            v = self.momentum * self.velocity[n] - self.lr * g
            if not np.all(np.isfinite(v)):
                for m in names:
                    self.params[m].data[...] = thetas[m]
                raise FloatingPointError(f"non-finite update for {n}")
            self.velocity[n] = v
            self.params[n].data[...] = thetas[n] + v
        return norm


class PlateauSchedule:
    """Divide the learning rate by 10 whenever validation perplexity fails
    to improve strictly on the previous best; signal stop once the rate
    falls below ``stop_below``. The stop flag is monotone."""

    def __init__(self, optimizer, decay: float = 0.1, stop_below: float = 1e-5):
        self.optimizer = optimizer
        self.decay = decay
        self.stop_below = stop_below
        self.best_val_ppl = math.inf
        self.stopped = False

    def update(self, new_val_ppl: float) -> bool:
        if new_val_ppl < self.best_val_ppl:
            self.best_val_ppl = new_val_ppl
        else:
            self.optimizer.lr *= self.decay
        if self.optimizer.lr < self.stop_below:
            self.stopped = True
        return self.stopped


def validate(model: ConvSeq2Seq, dev_examples) -> float:
    """exp(token-mean NLL) of the references under teacher forcing, with
    dropout disabled."""
    total, tokens = 0.0, 0
    for src, sets, tgt in dev_examples:
        loss, n = model.sequence_nll(src, sets, tgt, training=False)
        total += float(loss.data)
        tokens += n
    if tokens == 0:
        raise ValueError("validation set is empty")
    return math.exp(total / tokens)


def make_batches(examples, max_tokens: int = 2000):
    """Token-count-bounded batches over length-sorted examples. Sorting is
    stable on (target length, source length), so batching is deterministic
    for a fixed example order."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be positive")
    order = sorted(range(len(examples)),
                   key=lambda i: (len(examples[i][2]), len(examples[i][0]), i))
    batches, cur, cur_tokens = [], [], 0
    for i in order:
        cost = len(examples[i][0]) + len(examples[i][2])
        if cur and cur_tokens + cost > max_tokens:
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(examples[i])
        cur_tokens += cost
    if cur:
        batches.append(cur)
    return batches


class Trainer:
    """Deterministic training loop driving the optimizer and schedule.

    Examples are (source ids, position-set ids or None, target ids)
    triples. One seeded generator drives batch-order shuffling and every
    dropout mask, so a fixed seed reproduces checkpoints bit for bit.
    """

    def __init__(self, model: ConvSeq2Seq, train_examples, dev_examples, *,
                 lr: float = 0.2, momentum: float = 0.99,
                 clip_norm: float | None = 0.1, max_tokens_per_batch: int = 2000,
                 max_epochs: int = 50, seed: int = 0,
                 checkpoint_dir=None, log_path=None):
        if not train_examples:
            raise ValueError("training set is empty")
        self.model = model
        self.train_examples = list(train_examples)
        self.dev_examples = list(dev_examples)
        self.optimizer = NesterovOptimizer(model.parameters(), lr=lr,
                                           momentum=momentum, clip_norm=clip_norm)
        self.schedule = PlateauSchedule(self.optimizer)
        self.max_tokens_per_batch = max_tokens_per_batch
        self.max_epochs = max_epochs
        self.rng = np.random.default_rng(seed)
        self.checkpoint_dir = checkpoint_dir
        self.log_path = log_path
        self.history: list[dict] = []
        self._last_checkpoint = None

    def _batch_grad(self, batch):
        """Accumulate d(mean per-token NLL)/d(params) over the batch;
        returns (grad dict, summed NLL, token count)."""
        model = self.model
        model.zero_grad()
        total_tokens = sum(len(tgt) for _, _, tgt in batch)
        nll = 0.0
        for src, sets, tgt in batch:
            with Tape() as tape:
                loss, _ = model.sequence_nll(src, sets, tgt, rng=self.rng,
                                             training=True)
                backward(scale(loss, 1.0 / total_tokens), tape)
            nll += float(loss.data)
        if not math.isfinite(nll):
            raise TrainingDiverged(f"non-finite loss {nll}",
                                   last_checkpoint=self._last_checkpoint)
        return ({n: p.grad.copy() for n, p in model.parameters().items()},
                nll, total_tokens)

    def train(self):
        """Run epochs until the schedule stops or max_epochs is reached;
        returns the per-epoch history (with checkpoint paths if enabled)."""
        batches = make_batches(self.train_examples, self.max_tokens_per_batch)
        for epoch in range(1, self.max_epochs + 1):
            order = self.rng.permutation(len(batches))
            epoch_nll, epoch_tokens = 0.0, 0
            for b in order:
                batch = batches[b]
                holder = {}

                def grad_fn():
                    grads, nll, ntok = self._batch_grad(batch)
                    holder["nll"] = nll
                    holder["tokens"] = ntok
                    return grads

                try:
                    self.optimizer.step(grad_fn)
                except FloatingPointError as exc:
                    raise TrainingDiverged(
                        str(exc), last_checkpoint=self._last_checkpoint)
                epoch_nll += holder["nll"]
                epoch_tokens += holder["tokens"]
            train_nll = epoch_nll / max(epoch_tokens, 1)
            val_ppl = (validate(self.model, self.dev_examples)
                       if self.dev_examples else math.exp(train_nll))
            stop = self.schedule.update(val_ppl)
            entry = {"epoch": epoch, "train_nll": train_nll,
                     "val_ppl": val_ppl, "lr": self.optimizer.lr}
            if self.checkpoint_dir is not None:
                path = os.path.join(self.checkpoint_dir, f"epoch_{epoch:03d}.ckpt")
                self.model.save(path)
                self._last_checkpoint = path
                entry["checkpoint"] = path
            self.history.append(entry)
            self._log(entry)
            if stop:
                break
        return self.history

    def _log(self, entry: dict):
        line = (f"{entry['epoch']}\t{entry['train_nll']:.6f}"
                f"\t{entry['val_ppl']:.6f}\t{entry['lr']:.8g}")
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
