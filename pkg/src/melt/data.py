"""Synthetic algorithmic tasks: sequence copy and modular addition.

Token layout (vocab >= 4 + number of symbols)::

    0 BOS   1 SEP   2 EQ   3 unused   4.. payload symbols

copy         BOS s1..sn SEP s1..sn        answer = the second s1..sn
modular_add  BOS a b EQ c  a b EQ c ...   answer = each c = (a + b) mod p

Inputs are the sequence minus its last token and targets are the sequence
shifted by one; targets outside the answer spans are -1 (ignored).
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass

import numpy as np

BOS, SEP, EQ = 0, 1, 2
SYMBOL_BASE = 4


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (B, L) int64
    targets: np.ndarray  # (B, L) int64, -1 = ignored
    task: str

    @property
    def mask(self) -> np.ndarray:
        return self.targets >= 0

    def __len__(self):
        return self.inputs.shape[0]


def copy_sequences(rng, size: int, n_items: int, n_symbols: int) -> np.ndarray:
    payload = rng.integers(0, n_symbols, (size, n_items)) + SYMBOL_BASE
    bos = np.full((size, 1), BOS)
    sep = np.full((size, 1), SEP)
    return np.concatenate([bos, payload, sep, payload], axis=1)


def modular_add_sequences(rng, size: int, n_problems: int, modulus: int) -> np.ndarray:
    a = rng.integers(0, modulus, (size, n_problems))
    b = rng.integers(0, modulus, (size, n_problems))
    c = (a + b) % modulus
    eq = np.full_like(a, EQ)
    prob = np.stack([a + SYMBOL_BASE, b + SYMBOL_BASE, eq, c + SYMBOL_BASE], axis=-1)
    return np.concatenate([np.full((size, 1), BOS), prob.reshape(size, -1)], axis=1)


def _answer_mask(task: str, seqs: np.ndarray, n_items: int) -> np.ndarray:
    # mask over seqs[:, 1:] marking answer tokens
    L = seqs.shape[1] - 1
    m = np.zeros((seqs.shape[0], L), dtype=bool)
    if task == "copy":
        m[:, L - n_items:] = True
    else:
        m[:, 3::4] = True  # the c of each problem sits at sequence index 4k+4
    return m


def make_corpus(task: str, size: int, seed: int, *, n_items: int = 8, n_problems: int = 4,
                modulus: int = 7, vocab_size: int = 32) -> Batch:
    """``size`` sequences of ``task``; identical bytes for identical arguments."""
    rng = np.random.default_rng(seed)
    if task == "copy":
        n_symbols = vocab_size - SYMBOL_BASE
        if n_symbols < 2:
            raise ValueError(f"vocab_size={vocab_size} leaves no room for copy symbols")
        seqs = copy_sequences(rng, size, n_items, n_symbols)
        mask = _answer_mask(task, seqs, n_items)
    elif task == "modular_add":
        if modulus + SYMBOL_BASE > vocab_size:
            raise ValueError(f"modulus {modulus} does not fit vocab_size={vocab_size}")
        seqs = modular_add_sequences(rng, size, n_problems, modulus)
        mask = _answer_mask(task, seqs, n_problems)
    else:
        raise ValueError(f"unknown task {task!r}; expected 'copy' or 'modular_add'")
    inputs = seqs[:, :-1].astype(np.int64)
    targets = np.where(mask, seqs[:, 1:], -1).astype(np.int64)
    return Batch(inputs, targets, task)


def batch_stream(task: str, batch_size: int, seed: int, **kw):
    """Endless deterministic stream; batch ``i`` is drawn from seed (seed, i)."""
    i = 0
    while True:
        yield make_corpus(task, batch_size, int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), **kw)
        i += 1


def prefetch(iterable, maxsize: int = 4):
    """Run ``iterable`` in a producer thread behind a bounded FIFO.

    Order is preserved and the producer blocks when ``maxsize`` batches are
    waiting. An exception in the producer is re-raised in the consumer.
    Closing the returned generator stops the producer.
    """
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    stop = threading.Event()
    done = object()
    failure: list = []

    def put(item):
        while not stop.is_set():
            try:
                q.put(item, timeout=0.05)
                return
            except queue.Full:
                continue

    def produce():
        try:
            for item in iterable:
                put(item)
                if stop.is_set():
                    return
        except BaseException as e:  # handed to the consumer
            failure.append(e)
        finally:
            put(done)

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    try:
        while True:
            item = q.get()
            if item is done:
                if failure:
                    raise failure[0]
                return
            yield item
    finally:
        stop.set()
        th.join(timeout=1.0)
