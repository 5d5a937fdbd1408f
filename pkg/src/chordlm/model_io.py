"""Versioned plain-text serialization for all three model families.

Probabilities are written as shortest round-tripping decimal strings, so a
reloaded model is bit-identical to the saved one and repeated saves of the
same model produce identical bytes.
"""

from __future__ import annotations

import numpy as np

from .hmm import HmmParams
from .markov import MarkovModel
from .pcfg import PcfgParams

MODEL_MAGIC = "chordlm-model v1"

NO_HASH = "-"


def _write_table(lines: list[str], name: str, table: np.ndarray) -> None:
    rows = table.reshape(-1, table.shape[-1]) if table.ndim > 1 else table.reshape(1, -1)
    lines.append(f"table {name} {rows.shape[0]} {rows.shape[1]}")
    for row in rows:
        lines.append(" ".join(repr(float(v)) for v in row))


def save_model(model, path, vocab_hash: str | None = None) -> None:
    lines = [MODEL_MAGIC]
    tag = vocab_hash if vocab_hash else NO_HASH
    if isinstance(model, MarkovModel):
        lines.append("kind markov")
        lines.append(f"vocab_size {model.vocab_size}")
        lines.append(f"vocab_hash {tag}")
        lines.append(f"order {model.order}")
        lines.append(f"smoothing {model.smoothing}")
        lines.append(f"epsilon {repr(model.epsilon) if model.epsilon is not None else '-'}")
        for j, table in enumerate(model.initial_tables, start=1):
            _write_table(lines, f"initial{j}", table)
        _write_table(lines, "transitions", model.transitions)
    elif isinstance(model, HmmParams):
        lines.append("kind hmm")
        lines.append(f"vocab_size {model.vocab_size}")
        lines.append(f"vocab_hash {tag}")
        lines.append(f"n_states {model.n_states}")
        _write_table(lines, "initial", model.initial)
        _write_table(lines, "transition", model.transition)
        _write_table(lines, "emission", model.emission)
    elif isinstance(model, PcfgParams):
        lines.append("kind pcfg")
        lines.append(f"vocab_size {model.vocab_size}")
        lines.append(f"vocab_hash {tag}")
        lines.append(f"n_nonterminals {model.n_nonterminals}")
        _write_table(lines, "start_rules", model.start_rules)
        _write_table(lines, "start_emissions", model.start_emissions)
        _write_table(lines, "rules", model.rules.reshape(model.n_nonterminals, -1))
        _write_table(lines, "emissions", model.emissions)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, path):
        with open(path, encoding="utf-8") as fh:
            self.lines = fh.read().splitlines()
        self.pos = 0

    def next(self) -> str:
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def key_value(self, key: str) -> str:
        line = self.next()
        head, _, value = line.partition(" ")
        if head != key:
            raise ValueError(f"expected {key!r}, found {line!r}")
        return value

    def table(self, name: str) -> np.ndarray:
        header = self.next().split()
        if len(header) != 4 or header[0] != "table" or header[1] != name:
            raise ValueError(f"expected table {name!r}, found {' '.join(header)!r}")
        n_rows, n_cols = int(header[2]), int(header[3])
        rows = np.empty((n_rows, n_cols))
        for r in range(n_rows):
            rows[r] = np.array([float(v) for v in self.next().split()])
        return rows


def load_model(path):
    """Returns (model, vocab_hash); the hash is None when it was not recorded."""
    reader = _Reader(path)
    if reader.next() != MODEL_MAGIC:
        raise ValueError(f"not a model file (missing {MODEL_MAGIC!r} header)")
    kind = reader.key_value("kind")
    vocab_size = int(reader.key_value("vocab_size"))
    vocab_hash = reader.key_value("vocab_hash")
    vocab_hash = None if vocab_hash == NO_HASH else vocab_hash

    if kind == "markov":
        order = int(reader.key_value("order"))
        smoothing = reader.key_value("smoothing")
        eps_text = reader.key_value("epsilon")
        epsilon = None if eps_text == "-" else float(eps_text)
        initial_tables = []
        for j in range(1, order + 1):
            table = reader.table(f"initial{j}").reshape((vocab_size,) * j)
            initial_tables.append(table)
        transitions = reader.table("transitions").reshape((vocab_size,) * (order + 1))
        model = MarkovModel(order, vocab_size, initial_tables, transitions, smoothing, epsilon)
    elif kind == "hmm":
        n_states = int(reader.key_value("n_states"))
        model = HmmParams(
            initial=reader.table("initial").reshape(n_states),
            transition=reader.table("transition"),
            emission=reader.table("emission"),
        )
    elif kind == "pcfg":
        d = int(reader.key_value("n_nonterminals"))
        model = PcfgParams(
            start_rules=reader.table("start_rules"),
            start_emissions=reader.table("start_emissions").reshape(vocab_size),
            rules=reader.table("rules").reshape(d, d, d),
            emissions=reader.table("emissions"),
        )
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return model, vocab_hash
