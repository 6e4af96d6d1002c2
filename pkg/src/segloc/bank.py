"""Per-class negative-key memory: one FIFO queue per class.

Queue ``c`` only ever receives keys whose class differs from ``c``, so a
query of class ``c`` contrasted against queue ``c`` never meets a false
negative.
"""
from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .errors import ContractViolation, EmptyNegativesError, InitializationError, InvalidArgumentError

PAPER_QUEUE_SIZE = 2**14
TOY_QUEUE_SIZE = 512


class ClassQueueBank:
    """C ring buffers of capacity K holding (key, class id, sequence number).

    ``seq`` is a bank-wide insertion counter; it makes the FIFO order of
    every queue observable without peeking at embeddings.
    """

    def __init__(self, C: int, K: int, dim: int = 64):
        if C < 1 or K < 1:
            raise InvalidArgumentError(f"class count and capacity must be >= 1, got C={C}, K={K}")
        self.C, self.K, self.dim = C, K, dim
        self._keys = np.zeros((C, K, dim))
        self._cls = np.full((C, K), -1, dtype=np.int64)
        self._seq = np.full((C, K), -1, dtype=np.int64)
        self._head = np.zeros(C, dtype=np.int64)  # next write slot
        self._len = np.zeros(C, dtype=np.int64)
        self.next_seq = 0

    def __len__(self) -> int:
        return int(self._len.sum())

    def fill_levels(self) -> list[int]:
        return [int(n) for n in self._len]

    def is_full(self) -> bool:
        return bool((self._len == self.K).all())

    def _order(self, c: int) -> np.ndarray:
        n = self._len[c]
        start = (self._head[c] - n) % self.K
        return (start + np.arange(n)) % self.K

    def enqueue(self, keys: Iterable[tuple[np.ndarray, int]]) -> "ClassQueueBank":
        """Append each key to every queue except its own class's, evicting the oldest."""
        for key, class_id in keys:
            class_id = int(class_id)
            if not 0 <= class_id < self.C:
                raise ContractViolation(f"class id {class_id} outside [0, {self.C})")
            key = np.asarray(key, dtype=np.float64)
            if key.shape != (self.dim,):
                raise ContractViolation(f"key shape {key.shape}, expected ({self.dim},)")
            for c in range(self.C):
                if c == class_id:
                    continue
                slot = self._head[c]
                self._keys[c, slot] = key
                self._cls[c, slot] = class_id
                self._seq[c, slot] = self.next_seq
                self._head[c] = (slot + 1) % self.K
                self._len[c] = min(self._len[c] + 1, self.K)
            self.next_seq += 1
        return self

    def negatives(self, class_id: int) -> np.ndarray:
        """Read-only (n, dim) copy of queue ``class_id``, oldest first."""
        keys, _, _ = self.contents(class_id)
        if len(keys) == 0:
            raise EmptyNegativesError(f"queue {class_id} is empty")
        return keys

    def contents(self, class_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(keys, class ids, sequence numbers) of one queue, oldest first."""
        if not 0 <= class_id < self.C:
            raise ContractViolation(f"class id {class_id} outside [0, {self.C})")
        order = self._order(class_id)
        out = (self._keys[class_id, order], self._cls[class_id, order], self._seq[class_id, order])
        for a in out:
            a.setflags(write=False)
        return out

    def check_invariants(self) -> None:
        for c in range(self.C):
            keys, cls, seq = self.contents(c)
            if len(keys) > self.K:
                raise ContractViolation(f"queue {c} exceeds capacity")
            if (cls == c).any():
                raise ContractViolation(f"queue {c} holds a key of its own class")
            if (np.diff(seq) <= 0).any():
                raise ContractViolation(f"queue {c} is out of FIFO order")

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Float64 tensors for checkpointing, queue contents in FIFO order."""
        out = {}
        for c in range(self.C):
            keys, cls, seq = self.contents(c)
            out[f"bank/{c}/keys"] = np.array(keys)
            out[f"bank/{c}/classes"] = cls.astype(np.float64)
            out[f"bank/{c}/seq"] = seq.astype(np.float64)
        return out

    @classmethod
    def from_state(cls, C: int, K: int, dim: int, next_seq: int, tensors: dict[str, np.ndarray]) -> "ClassQueueBank":
        bank = cls(C, K, dim)
        for c in range(C):
            keys = tensors[f"bank/{c}/keys"].reshape(-1, dim)
            n = len(keys)
            bank._keys[c, :n] = keys
            bank._cls[c, :n] = tensors[f"bank/{c}/classes"].astype(np.int64)
            bank._seq[c, :n] = tensors[f"bank/{c}/seq"].astype(np.int64)
            bank._len[c] = n
            bank._head[c] = n % K
        bank.next_seq = next_seq
        return bank


def new_bank(C: int, K: int, dim: int = 64) -> ClassQueueBank:
    return ClassQueueBank(C, K, dim)


def enqueue_keys(bank: ClassQueueBank, keys: Iterable[tuple[np.ndarray, int]]) -> ClassQueueBank:
    return bank.enqueue(keys)


def negatives_for(bank: ClassQueueBank, class_id: int) -> np.ndarray:
    return bank.negatives(class_id)


def random_key_source(C: int, dim: int, rng: np.random.Generator):
    """Endless stream of normalized Gaussian keys with uniform class ids."""
    while True:
        v = rng.standard_normal(dim)
        yield v / np.linalg.norm(v), int(rng.integers(C))


def init_bank(
    bank: ClassQueueBank,
    mode: str,
    key_source: Iterable[tuple[np.ndarray, int]] | None = None,
    rng: np.random.Generator | None = None,
) -> ClassQueueBank:
    """Enqueue keys until every queue holds exactly K keys.

    ``mode="model"`` needs ``key_source`` (keys of the initial key encoder);
    ``mode="random"`` defaults to normalized Gaussian keys drawn from ``rng``.
    """
    if mode == "random":
        if key_source is None:
            key_source = random_key_source(bank.C, bank.dim, rng if rng is not None else np.random.default_rng(0))
    elif mode == "model":
        if key_source is None:
            raise InvalidArgumentError("model initialization needs a key source")
    else:
        raise InvalidArgumentError(f"unknown bank initialization mode {mode!r}")
    if bank.C == 1:
        raise InitializationError("a single-class bank can never be filled: every key is excluded from its queue")
    it = iter(key_source)
    while not bank.is_full():
        try:
            key = next(it)
        except StopIteration:
            raise InitializationError(
                f"key source exhausted with queue fill levels {bank.fill_levels()} (capacity {bank.K})"
            ) from None
        bank.enqueue([key])
    return bank
