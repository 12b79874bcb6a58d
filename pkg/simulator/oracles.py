"""Stochastic gradient oracles with counter-based randomness and query accounting."""

import math
import threading
from concurrent.futures import Executor
from typing import Optional, List, Set

import numpy as np

import config
from schema import OracleSpec
from .problems import ProblemSpec, Loss, NotHonestError


class QueryLedger:
    """
    Oracle query tally. One query means every honest node drew one stochastic gradient.

    A round is counted once with its batch size, whether the honest nodes
    query together or one at a time. Thread-safe; also hands out unique round
    ids for the generator keys.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0
        self.per_round: List[int] = []
        self._counted: Set[int] = set()
        self._next_round = 0

    def record(self, m: int, round_index: Optional[int] = None) -> None:
        with self._lock:
            if round_index is not None:
                if round_index in self._counted:
                    return
                self._counted.add(round_index)
            self.count += m
            self.per_round.append(m)

    def next_round(self) -> int:
        with self._lock:
            r = self._next_round
            self._next_round += 1
            return r


def generator(seed: int, node: int, round_index: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, node, round, stream); independent of call order."""
    key = np.random.SeedSequence([seed, node, round_index, stream])
    return np.random.Generator(np.random.Philox(key))


def draw(
    spec: OracleSpec,
    loss: Loss,
    x: np.ndarray,
    m: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Draw m stochastic gradients of one loss as rows of an (m, d) array.

    Row l depends only on the generator state after rows 0..l-1, so a
    prefix of a larger batch equals a smaller batch.
    """
    if spec.noise_kind == config.NOISE_GAUSSIAN:
        g = loss.grad(x)
        if spec.sigma_sq == 0.0:
            return np.broadcast_to(g, (m, g.shape[0])).copy()
        noise = rng.standard_normal(size=(m, g.shape[0]))
        return g + math.sqrt(spec.sigma_sq / g.shape[0]) * noise
    return loss.sample_grads(x, rng, m)


class Oracle:
    """Binds an OracleSpec to a problem and a ledger."""

    def __init__(
        self,
        spec: OracleSpec,
        problem: ProblemSpec,
        ledger: Optional[QueryLedger] = None,
        executor: Optional[Executor] = None,
    ):
        self.spec = spec
        self.problem = problem
        self.ledger = ledger if ledger is not None else QueryLedger()
        self.executor = executor

    def rebind(self, problem: ProblemSpec) -> "Oracle":
        """Same spec, ledger and workers on another problem (used by surrogate solves)."""
        return Oracle(self.spec, problem, self.ledger, self.executor)

    def _honest(self, node: int) -> Loss:
        if node not in self.problem.honest_set:
            raise NotHonestError(f"node {node} is Byzantine; the oracle only serves honest nodes")
        return self.problem.losses[node]

    def sample_gradient(self, node: int, x: np.ndarray, round_index: int, slot: int) -> np.ndarray:
        loss = self._honest(node)
        if self.spec.sigma_sq == 0.0 and self.spec.noise_kind == config.NOISE_GAUSSIAN:
            return loss.grad(x)
        rng = generator(self.spec.seed, node, round_index)
        return draw(self.spec, loss, x, slot + 1, rng)[slot]

    def minibatch_gradient(
        self, node: int, x: np.ndarray, m: int, round_index: int, record: bool = True
    ) -> np.ndarray:
        if m < 1:
            raise ValueError(f"batch size must be at least 1, got {m}")
        loss = self._honest(node)
        g = self._batch(loss, node, x, m, round_index)
        if record:
            self.ledger.record(m, round_index)
        return g

    def _batch(self, loss: Loss, node: int, x: np.ndarray, m: int, round_index: int) -> np.ndarray:
        if self.spec.sigma_sq == 0.0 and self.spec.noise_kind == config.NOISE_GAUSSIAN:
            return loss.grad(x)
        rows = draw(self.spec, loss, x, m, generator(self.spec.seed, node, round_index))
        return rows[0].copy() if m == 1 else rows.mean(axis=0)

    def honest_minibatches(self, x: np.ndarray, m: int, round_index: int) -> np.ndarray:
        """(|H|, d) mini-batch gradients at x; the ledger grows by m."""
        if m < 1:
            raise ValueError(f"batch size must be at least 1, got {m}")
        nodes = self.problem.honest_set
        work = lambda node: self._batch(self.problem.losses[node], node, x, m, round_index)
        if self.executor is not None:
            grads = list(self.executor.map(work, nodes))
        else:
            grads = [work(node) for node in nodes]
        self.ledger.record(m, round_index)
        return np.stack(grads)

    def byzantine_minibatches(
        self, losses: List[Loss], x: np.ndarray, m: int, round_index: int
    ) -> np.ndarray:
        """Gradients Byzantine nodes compute on their own (poisoned) losses; not counted as queries."""
        h = self.problem.honest_count
        return np.stack([
            self._batch(loss, h + k, x, m, round_index) for k, loss in enumerate(losses)
        ])


def sample_gradient(
    oracle: Oracle, node: int, x: np.ndarray, round_index: int, slot: int
) -> np.ndarray:
    """Unbiased stochastic gradient of node's loss; reproducible per (seed, node, round, slot)."""
    return oracle.sample_gradient(node, x, round_index, slot)


def minibatch_gradient(
    oracle: Oracle, node: int, x: np.ndarray, m: int, round_index: int
) -> np.ndarray:
    """Average of slots 0..m-1 of sample_gradient; the round counts m queries once across nodes."""
    return oracle.minibatch_gradient(node, x, m, round_index)
