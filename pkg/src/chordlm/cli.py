"""Command-line experiment driver.

Subcommands
    prepare   build vocabulary, encode, split, and subsample a corpus
    train     train a single (size, algorithm, seed, data-size) cell
    sweep     train and evaluate the full configured grid into results.csv
    analyze   report latent structure of a trained HMM or PCFG
    generate  sample sequences from a trained model

Every command takes ``--config`` (JSON) plus flag overrides; failures print a
machine-readable JSON object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluate, hmm, markov, model_io, pcfg
from .config import ExperimentConfig, cell_seed, kappa_from_mean_length
from .corpus import EncodedDataset, Vocabulary, build_vocabulary, encode, parse_corpus, split, subsample

RESULT_FIELDS = [
    "model",
    "size",
    "param_count",
    "N_X",
    "seed",
    "algo",
    "train_perplexity",
    "test_perplexity",
    "error_rate",
    "rmrr",
    "wall_time",
]
CSV_HEADER = RESULT_FIELDS + ["best_by_train", "best_by_test", "error"]

ANALYZE_TOP_SYMBOLS = 12
ANALYZE_THRESHOLD = 0.05


# ------------------------------------------------------------ encoded files


def _write_encoded(path: Path, dataset: EncodedDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in dataset.sequences:
            fh.write(" ".join(str(int(i)) for i in seq) + "\n")


def _read_encoded(path: Path, vocab: Vocabulary) -> EncodedDataset:
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                sequences.append(np.array([int(t) for t in line.split()], dtype=np.int64))
    return EncodedDataset(sequences=sequences, vocab=vocab)


# ----------------------------------------------------------------- prepare


def cmd_prepare(cfg: ExperimentConfig) -> dict:
    if not cfg.corpus:
        raise ValueError("prepare requires a corpus path")
    corpus_path = Path(cfg.corpus)
    raw = corpus_path.read_bytes()
    sequences = parse_corpus(raw.decode("utf-8"))
    if not sequences:
        raise ValueError(f"corpus {corpus_path} contains no sequences")

    vocab = build_vocabulary(sequences, cfg.vocab_k)
    dataset = encode(sequences, vocab)
    test_count = cfg.test_count if cfg.test_count is not None else len(dataset) // 10
    train, test = split(dataset, test_count, cfg.data_seed)
    if len(train) == 0:
        raise ValueError("no training sequences left after the test split")
    train_sizes = cfg.train_sizes if cfg.train_sizes is not None else [len(train)]
    for n_x in train_sizes:
        if not 1 <= n_x <= len(train):
            raise ValueError(f"train size {n_x} out of range [1, {len(train)}]")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    _write_encoded(out / "train.ids", train)
    _write_encoded(out / "test.ids", test)
    for n_x in train_sizes:
        _write_encoded(out / f"train_nx{n_x}.ids", subsample(train, n_x, cfg.data_seed))

    mean_train_length = sum(len(s) for s in train.sequences) / len(train)
    meta = {
        "config": cfg.as_dict(),
        "config_hash": cfg.config_hash(),
        "corpus_sha256": hashlib.sha256(raw).hexdigest(),
        "n_sequences": len(dataset),
        "vocab_size": vocab.size,
        "test_count": test_count,
        "train_sizes": train_sizes,
        "mean_train_length": mean_train_length,
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return meta


def _load_prepared(cfg: ExperimentConfig) -> dict:
    meta_path = Path(cfg.out_dir) / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found; run `chordlm prepare` first")
    return json.loads(meta_path.read_text())


# ------------------------------------------------------------ cell training


def _cell_name(model: str, size: int, n_x: int, algo: str, seed: int) -> str:
    return f"{model}_s{size}_nx{n_x}_{algo}_seed{seed}"


def _train_hmm(cfg: ExperimentConfig, train: EncodedDataset, size: int, algo: str, coords) -> tuple:
    init = hmm.init_random(size, train.n_symbols, cell_seed(cfg.config_hash(), "init", *coords))
    if algo == "em":
        fitted, trace = hmm.em_fit(
            init, train, hmm.EmConfig(max_iter=cfg.resolved_em_max_iter(), rel_tol=cfg.rel_tol)
        )
        return fitted, {"algorithm": "em", "log_likelihood": trace}
    if algo == "gs":
        prior = hmm.HmmPrior.symmetric(size, train.n_symbols, cfg.dirichlet_alpha)
        fitted, trace = hmm.gibbs_fit(
            init,
            train,
            prior,
            hmm.GibbsConfig(
                n_samples=cfg.resolved_gs_samples(),
                polish_iters=cfg.polish_iters,
                seed=cell_seed(cfg.config_hash(), "gibbs", *coords),
                rel_tol=cfg.rel_tol,
            ),
        )
        return fitted, {
            "algorithm": "gs",
            "sample_log_evidence": trace.sample_log_evidence,
            "polish_log_likelihood": trace.polish_trace,
        }
    raise ValueError(f"unknown HMM algorithm {algo!r}")


def _pcfg_initializer(
    cfg: ExperimentConfig, train: EncodedDataset, size: int, coords, mean_train_length: float
) -> pcfg.PcfgParams:
    if cfg.pcfg_init == "random":
        return pcfg.init_random(size, train.n_symbols, cell_seed(cfg.config_hash(), "init", *coords))
    # linear-chain initialization from a Gibbs-trained HMM of the same size
    hmm_cfg = dataclasses.replace(cfg, model="hmm")
    base, _ = _train_hmm(hmm_cfg, train, size, "gs", coords + ("pcfg-init",))
    kappa = cfg.kappa if cfg.kappa is not None else kappa_from_mean_length(mean_train_length)
    eta = cfg.eta if cfg.eta is not None else 0.01 / size
    return pcfg.init_from_hmm(base, kappa=kappa, eta=eta)


def _train_pcfg(
    cfg: ExperimentConfig,
    train: EncodedDataset,
    size: int,
    algo: str,
    coords,
    mean_train_length: float,
) -> tuple:
    init = _pcfg_initializer(cfg, train, size, coords, mean_train_length)
    if algo == "em":
        fitted, trace = pcfg.em_fit(
            init,
            train,
            pcfg.EmConfig(
                max_iter=cfg.resolved_em_max_iter(),
                rel_tol=cfg.rel_tol,
                max_length=cfg.pcfg_max_length,
            ),
        )
        return fitted, {"algorithm": "em", "initialization": cfg.pcfg_init, "log_likelihood": trace}
    if algo == "gs":
        prior = pcfg.PcfgPrior.symmetric(size, train.n_symbols, cfg.dirichlet_alpha)
        fitted, trace = pcfg.gibbs_fit(
            init,
            train,
            prior,
            pcfg.GibbsConfig(
                n_samples=cfg.resolved_gs_samples(),
                polish_iters=cfg.polish_iters,
                seed=cell_seed(cfg.config_hash(), "gibbs", *coords),
                rel_tol=cfg.rel_tol,
                max_length=cfg.pcfg_max_length,
            ),
        )
        return fitted, {
            "algorithm": "gs",
            "initialization": cfg.pcfg_init,
            "sample_log_evidence": trace.sample_log_evidence,
            "polish_log_likelihood": trace.polish_trace,
        }
    raise ValueError(f"unknown PCFG algorithm {algo!r}")


def _train_cell(cfg: ExperimentConfig, train: EncodedDataset, size: int, algo: str, seed: int, n_x: int, mean_train_length: float):
    coords = (cfg.model, size, n_x, algo, seed)
    if cfg.model == "markov":
        model = markov.fit(train, order=size, smoothing=algo, epsilon=cfg.epsilon)
        return model, {"algorithm": algo}
    if cfg.model == "hmm":
        return _train_hmm(cfg, train, size, algo, coords)
    return _train_pcfg(cfg, train, size, algo, coords, mean_train_length)


def _run_cell(payload: dict) -> dict:
    """Train and evaluate one grid cell; returns a result row.

    Top-level function so sweep cells can run in worker processes; all inputs
    travel as plain paths and the configuration dictionary.
    """
    cfg = ExperimentConfig.from_dict(payload["config"])
    size, algo, seed, n_x = payload["size"], payload["algo"], payload["seed"], payload["n_x"]
    row = {
        "model": cfg.model,
        "size": size,
        "param_count": "",
        "N_X": n_x,
        "seed": seed,
        "algo": algo,
        "train_perplexity": "",
        "test_perplexity": "",
        "error_rate": "",
        "rmrr": "",
        "wall_time": "",
        "error": "",
    }
    started = time.perf_counter()
    try:
        out = Path(cfg.out_dir)
        vocab = Vocabulary.load(out / "vocab.txt")
        train = _read_encoded(out / f"train_nx{n_x}.ids", vocab)
        test = _read_encoded(out / "test.ids", vocab)
        row["param_count"] = evaluate.param_count(cfg.model, size, vocab.size)

        model, log = _train_cell(cfg, train, size, algo, seed, n_x, payload["mean_train_length"])

        models_dir = out / "models"
        models_dir.mkdir(exist_ok=True)
        name = _cell_name(cfg.model, size, n_x, algo, seed)
        model_io.save_model(model, models_dir / f"{name}.model", vocab_hash=vocab.content_hash())
        (models_dir / f"{name}.log.json").write_text(json.dumps(log, sort_keys=True) + "\n")

        row["train_perplexity"] = evaluate.perplexity(model, train)
        row["test_perplexity"] = evaluate.perplexity(model, test)
        row["error_rate"] = evaluate.error_rate(model, test)
        row["rmrr"] = evaluate.rmrr(model, test)
    except Exception as exc:  # recorded per row, the sweep continues
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["wall_time"] = time.perf_counter() - started
    return row


def cmd_train(cfg: ExperimentConfig, size: int, algo: str, seed: int, n_x: int | None) -> dict:
    meta = _load_prepared(cfg)
    n_x = n_x if n_x is not None else meta["train_sizes"][-1]
    payload = {
        "config": cfg.as_dict(),
        "size": size,
        "algo": algo,
        "seed": seed,
        "n_x": n_x,
        "mean_train_length": meta["mean_train_length"],
    }
    row = _run_cell(payload)
    if row["error"]:
        raise RuntimeError(row["error"])
    return row


# -------------------------------------------------------------------- sweep


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_sweep(cfg: ExperimentConfig) -> Path:
    meta = _load_prepared(cfg)
    payloads = []
    for n_x in meta["train_sizes"]:
        for size in cfg.resolved_sizes():
            for algo in cfg.resolved_algos():
                for seed in cfg.seeds:
                    payloads.append(
                        {
                            "config": cfg.as_dict(),
                            "size": size,
                            "algo": algo,
                            "seed": seed,
                            "n_x": n_x,
                            "mean_train_length": meta["mean_train_length"],
                        }
                    )
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_run_cell, payloads))
    else:
        rows = [_run_cell(p) for p in payloads]

    # per-cell best-seed flags, judged by training and by test perplexity
    groups: dict[tuple, list[int]] = {}
    for i, row in enumerate(rows):
        key = (row["model"], row["size"], row["N_X"], row["algo"])
        groups.setdefault(key, []).append(i)
    for row in rows:
        row["best_by_train"] = ""
        row["best_by_test"] = ""
    for indices in groups.values():
        ok = [i for i in indices if not rows[i]["error"]]
        if not ok:
            continue
        best_train = min(ok, key=lambda i: rows[i]["train_perplexity"])
        best_test = min(ok, key=lambda i: rows[i]["test_perplexity"])
        for i in ok:
            rows[i]["best_by_train"] = int(i == best_train)
            rows[i]["best_by_test"] = int(i == best_test)

    out_path = Path(cfg.out_dir) / "results.csv"
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row[c]) for c in CSV_HEADER) + "\n")
    return out_path


# ------------------------------------------------------------------ analyze


def _top_symbols(row: np.ndarray, vocab: Vocabulary, top: int) -> list[dict]:
    order = np.argsort(-row, kind="stable")[: min(top, len(row))]
    return [
        {"symbol": vocab.symbols[int(x)], "probability": float(row[int(x)])}
        for x in order
        if row[int(x)] > 0.0
    ]


def cmd_analyze(model_path: str, vocab_path: str, threshold: float) -> dict:
    model, recorded_hash = model_io.load_model(model_path)
    vocab = Vocabulary.load(vocab_path)
    if recorded_hash is not None and recorded_hash != vocab.content_hash():
        raise ValueError("vocabulary does not match the one the model was trained on")
    if isinstance(model, markov.MarkovModel):
        raise ValueError("Markov models have no latent structure to analyze")

    if isinstance(model, hmm.HmmParams):
        info = hmm.info_measures(model)
        stationary = hmm.stationary_distribution(model)
        states = [
            {
                "state": z,
                "stationary_probability": float(stationary[z]),
                "top_symbols": _top_symbols(model.emission[z], vocab, ANALYZE_TOP_SYMBOLS),
            }
            for z in range(model.n_states)
        ]
        transitions = [
            {"from": int(z), "to": int(w), "probability": float(model.transition[z, w])}
            for z in range(model.n_states)
            for w in range(model.n_states)
            if model.transition[z, w] > threshold
        ]
        return {
            "kind": "hmm",
            "n_states": model.n_states,
            "info_measures": info.as_dict(),
            "states": states,
            "transitions_above_threshold": transitions,
            "threshold": threshold,
        }

    d = model.n_nonterminals
    nonterminals = [
        {
            "nonterminal": z,
            "top_symbols": _top_symbols(model.emissions[z], vocab, ANALYZE_TOP_SYMBOLS),
        }
        for z in range(d)
    ]
    start_rules = [
        {"left": int(l), "right": int(r), "probability": float(model.start_rules[l, r])}
        for l in range(d)
        for r in range(d)
        if model.start_rules[l, r] > threshold
    ]
    rules = [
        {
            "head": int(z),
            "left": int(l),
            "right": int(r),
            "probability": float(model.rules[z, l, r]),
        }
        for z in range(d)
        for l in range(d)
        for r in range(d)
        if model.rules[z, l, r] > threshold
    ]
    return {
        "kind": "pcfg",
        "n_nonterminals": d,
        "nonterminals": nonterminals,
        "start_rules_above_threshold": start_rules,
        "rules_above_threshold": rules,
        "threshold": threshold,
    }


# ----------------------------------------------------------------- generate


def cmd_generate(
    model_path: str,
    vocab_path: str,
    count: int,
    seed: int,
    length: int | None,
    trees: bool = False,
) -> list[str]:
    model, recorded_hash = model_io.load_model(model_path)
    vocab = Vocabulary.load(vocab_path)
    if recorded_hash is not None and recorded_hash != vocab.content_hash():
        raise ValueError("vocabulary does not match the one the model was trained on")
    lines = []
    if isinstance(model, pcfg.PcfgParams):
        if length is not None:
            raise ValueError("grammar sampling determines its own length; drop --length")
        for i in range(count):
            tree, ids = pcfg.sample_tree(model, seed=cell_seed(str(seed), "generate", i))
            if trees:
                lines.append(tree.to_bracketed(vocab.symbols))
            else:
                lines.append(" ".join(vocab.symbols[int(x)] for x in ids))
        return lines
    if trees:
        raise ValueError("--trees is only meaningful for grammar models")
    if length is None:
        raise ValueError("--length is required for Markov and HMM models")
    for i in range(count):
        child = cell_seed(str(seed), "generate", i)
        if isinstance(model, hmm.HmmParams):
            ids = hmm.sample_sequence(model, length, seed=child)
        else:
            ids = model.sample_sequence(length, seed=child)
        lines.append(" ".join(vocab.symbols[int(x)] for x in ids))
    return lines


# --------------------------------------------------------------------- main


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _str_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chordlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--corpus")
        p.add_argument("--out-dir")
        p.add_argument("--vocab-k", type=int)
        p.add_argument("--test-count", type=int)
        p.add_argument("--data-seed", type=int)
        p.add_argument("--train-sizes", type=_int_list)
        p.add_argument("--model", choices=["markov", "hmm", "pcfg"])
        p.add_argument("--sizes", type=_int_list)
        p.add_argument("--algos", type=_str_list)
        p.add_argument("--seeds", type=_int_list)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--dirichlet-alpha", type=float)
        p.add_argument("--em-max-iter", type=int)
        p.add_argument("--rel-tol", type=float)
        p.add_argument("--gs-samples", type=int)
        p.add_argument("--polish-iters", type=int)
        p.add_argument("--kappa", type=float)
        p.add_argument("--eta", type=float)
        p.add_argument("--pcfg-init", choices=["random", "hmm"])
        p.add_argument("--pcfg-max-length", type=int)
        p.add_argument("--workers", type=int)

    p = sub.add_parser("prepare", help="encode and split a corpus")
    add_config_args(p)

    p = sub.add_parser("train", help="train one grid cell")
    add_config_args(p)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--algo", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-x", type=int)

    p = sub.add_parser("sweep", help="train and evaluate the configured grid")
    add_config_args(p)

    p = sub.add_parser("analyze", help="latent-structure report for a model")
    p.add_argument("--model-file", required=True)
    p.add_argument("--vocab-file", required=True)
    p.add_argument("--threshold", type=float, default=ANALYZE_THRESHOLD)
    p.add_argument("--out")

    p = sub.add_parser("generate", help="sample sequences from a model")
    p.add_argument("--model-file", required=True)
    p.add_argument("--vocab-file", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=int)
    p.add_argument("--trees", action="store_true", help="emit bracketed derivations (PCFG only)")
    p.add_argument("--out")

    return parser


_CONFIG_FIELD_FLAGS = [
    "corpus",
    "out_dir",
    "vocab_k",
    "test_count",
    "data_seed",
    "train_sizes",
    "model",
    "sizes",
    "algos",
    "seeds",
    "epsilon",
    "dirichlet_alpha",
    "em_max_iter",
    "rel_tol",
    "gs_samples",
    "polish_iters",
    "kappa",
    "eta",
    "pcfg_init",
    "pcfg_max_length",
    "workers",
]


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = ExperimentConfig.from_file(args.config).as_dict() if args.config else {}
    for name in _CONFIG_FIELD_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    return ExperimentConfig.from_dict(base)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "prepare":
            meta = cmd_prepare(_config_from_args(args))
            print(json.dumps({"prepared": meta["config"]["out_dir"], "vocab_size": meta["vocab_size"]}))
        elif args.command == "train":
            row = cmd_train(_config_from_args(args), args.size, args.algo, args.seed, args.n_x)
            print(json.dumps({k: row[k] for k in RESULT_FIELDS}, sort_keys=True))
        elif args.command == "sweep":
            path = cmd_sweep(_config_from_args(args))
            print(json.dumps({"results": str(path)}))
        elif args.command == "analyze":
            report = cmd_analyze(args.model_file, args.vocab_file, args.threshold)
            text = json.dumps(report, indent=2, sort_keys=True)
            if args.out:
                Path(args.out).write_text(text + "\n")
            else:
                print(text)
        elif args.command == "generate":
            lines = cmd_generate(
                args.model_file, args.vocab_file, args.count, args.seed, args.length, args.trees
            )
            text = "\n".join(lines)
            if args.out:
                Path(args.out).write_text(text + "\n")
            else:
                print(text)
        return 0
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
