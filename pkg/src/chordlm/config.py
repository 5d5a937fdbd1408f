"""Experiment configuration: one structured file drives the whole pipeline.

Every training default is embedded here and overridable from the command
line; the derived per-cell seeds make each sweep cell a pure function of the
configuration and the corpus bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

HMM_SIZE_GRID = list(range(1, 11)) + [15, 20, 25, 30, 40, 50, 60, 70, 80, 90, 100]
PCFG_SIZE_GRID = list(range(1, 11)) + [15, 20]
MARKOV_ORDER_GRID = [1, 2, 3]

MODEL_KINDS = ("markov", "hmm", "pcfg")


@dataclass
class ExperimentConfig:
    corpus: str | None = None
    out_dir: str = "runs/default"

    # data preparation
    vocab_k: int = 10
    test_count: int | None = None  # default: one tenth of the corpus
    data_seed: int = 0
    train_sizes: list[int] | None = None  # default: the full training split

    # model grid
    model: str = "hmm"
    sizes: list[int] | None = None
    algos: list[str] | None = None
    seeds: list[int] = field(default_factory=lambda: [0])

    # hyperparameters
    epsilon: float = 0.1
    dirichlet_alpha: float = 0.1
    em_max_iter: int | None = None  # 500 for HMM, 200 for PCFG
    rel_tol: float = 1e-5
    gs_samples: int | None = None  # 500 for HMM, 200 for PCFG
    polish_iters: int = 50
    kappa: float | None = None  # default: matched to the training mean length
    eta: float | None = None  # default: 0.01 / n_nonterminals
    pcfg_init: str = "random"  # random | hmm
    pcfg_max_length: int = 64

    workers: int = 1

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}")
        if self.pcfg_init not in ("random", "hmm"):
            raise ValueError("pcfg_init must be 'random' or 'hmm'")

    # ------------------------------------------------------------- defaults

    def resolved_sizes(self) -> list[int]:
        if self.sizes is not None:
            return list(self.sizes)
        return {
            "markov": MARKOV_ORDER_GRID,
            "hmm": HMM_SIZE_GRID,
            "pcfg": PCFG_SIZE_GRID,
        }[self.model]

    def resolved_algos(self) -> list[str]:
        if self.algos is not None:
            return list(self.algos)
        return ["additive", "kn", "mkn"] if self.model == "markov" else ["em", "gs"]

    def resolved_em_max_iter(self) -> int:
        if self.em_max_iter is not None:
            return self.em_max_iter
        return 200 if self.model == "pcfg" else 500

    def resolved_gs_samples(self) -> int:
        if self.gs_samples is not None:
            return self.gs_samples
        return 200 if self.model == "pcfg" else 500

    # ---------------------------------------------------------------- misc

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of the experiment-defining fields, which seeds every cell.

        Execution details (worker count, output location) are excluded so they
        cannot change the trained models.
        """
        payload = self.as_dict()
        payload.pop("workers")
        payload.pop("out_dir")
        payload = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


def cell_seed(config_hash: str, *coordinates) -> int:
    """Deterministic RNG seed owned by one sweep cell."""
    text = config_hash + "|" + "|".join(str(c) for c in coordinates)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def kappa_from_mean_length(mean_length: float) -> float:
    """Invert the expected generated length 2k/(2k-1) for the emission
    probability k; only defined for mean lengths of at least 2."""
    if mean_length < 2.0:
        raise ValueError(
            f"mean sequence length {mean_length:.3g} < 2 admits no emission "
            "probability in (1/2, 1]; set kappa explicitly"
        )
    return mean_length / (2.0 * mean_length - 2.0)
