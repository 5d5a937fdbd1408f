import json
import subprocess
import sys

import numpy as np
import pytest

from chordlm import cli, hmm, markov, model_io, pcfg
from chordlm.config import (
    ExperimentConfig,
    HMM_SIZE_GRID,
    PCFG_SIZE_GRID,
    cell_seed,
    kappa_from_mean_length,
)
from chordlm.corpus import Vocabulary
from oracles import make_dataset


def write_corpus(path, rng, n_sequences=30, alphabet=("C", "F", "G", "Am", "Dm", "Em")):
    lines = []
    for _ in range(n_sequences):
        n = int(rng.integers(3, 10))
        lines.append(" ".join(str(rng.choice(alphabet)) for _ in range(n)))
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def prepared(tmp_path):
    rng = np.random.default_rng(0)
    corpus = write_corpus(tmp_path / "corpus.txt", rng)
    cfg = ExperimentConfig(
        corpus=str(corpus),
        out_dir=str(tmp_path / "run"),
        vocab_k=4,
        test_count=6,
        train_sizes=[8],
        model="hmm",
        sizes=[1, 2],
        algos=["em"],
        seeds=[0, 1],
        em_max_iter=10,
    )
    cli.cmd_prepare(cfg)
    return cfg, tmp_path


# ------------------------------------------------------------------ config


def test_config_defaults_match_protocol():
    cfg = ExperimentConfig(model="hmm")
    assert cfg.resolved_sizes() == HMM_SIZE_GRID
    assert cfg.resolved_em_max_iter() == 500
    assert cfg.resolved_gs_samples() == 500
    assert cfg.polish_iters == 50
    assert cfg.dirichlet_alpha == 0.1
    assert cfg.epsilon == 0.1
    assert cfg.rel_tol == 1e-5

    pc = ExperimentConfig(model="pcfg")
    assert pc.resolved_sizes() == PCFG_SIZE_GRID
    assert pc.resolved_em_max_iter() == 200
    assert pc.resolved_gs_samples() == 200

    mk = ExperimentConfig(model="markov")
    assert mk.resolved_sizes() == [1, 2, 3]
    assert mk.resolved_algos() == ["additive", "kn", "mkn"]


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"vocab_size": 10})


def test_kappa_from_mean_length():
    assert kappa_from_mean_length(13.0) == pytest.approx(0.5416, abs=1e-4)
    assert kappa_from_mean_length(6.0) == pytest.approx(0.6, abs=1e-12)
    with pytest.raises(ValueError):
        kappa_from_mean_length(1.5)


def test_cell_seed_stable():
    assert cell_seed("abc", "hmm", 4, 30, "gs", 0) == cell_seed("abc", "hmm", 4, 30, "gs", 0)
    assert cell_seed("abc", "hmm", 4, 30, "gs", 0) != cell_seed("abc", "hmm", 4, 30, "gs", 1)


# ----------------------------------------------------------------- prepare


def test_prepare_vocab_size_and_artifacts(prepared):
    cfg, tmp_path = prepared
    run = tmp_path / "run"
    vocab = Vocabulary.load(run / "vocab.txt")
    assert vocab.size == 5  # K=4 plus Other
    assert (run / "train.ids").exists()
    assert (run / "test.ids").exists()
    assert (run / "train_nx8.ids").exists()
    meta = json.loads((run / "meta.json").read_text())
    assert meta["test_count"] == 6


def test_prepare_idempotent(prepared):
    cfg, tmp_path = prepared
    run = tmp_path / "run"
    before = {p.name: p.read_bytes() for p in run.iterdir() if p.is_file()}
    cli.cmd_prepare(cfg)
    after = {p.name: p.read_bytes() for p in run.iterdir() if p.is_file()}
    assert before == after


def test_prepare_default_vocab_k_is_ten(tmp_path):
    rng = np.random.default_rng(1)
    corpus = write_corpus(
        tmp_path / "c.txt", rng, n_sequences=60,
        alphabet=tuple("ABCDEFGHIJKLMNO"),
    )
    cfg = ExperimentConfig(corpus=str(corpus), out_dir=str(tmp_path / "r"))
    meta = cli.cmd_prepare(cfg)
    assert meta["vocab_size"] == 11


def test_prepare_test_count_out_of_range(tmp_path):
    rng = np.random.default_rng(2)
    corpus = write_corpus(tmp_path / "c.txt", rng, n_sequences=5)
    cfg = ExperimentConfig(corpus=str(corpus), out_dir=str(tmp_path / "r"), test_count=9)
    with pytest.raises(ValueError):
        cli.cmd_prepare(cfg)


# ------------------------------------------------------------------- train


def test_train_cell_writes_model_and_monotone_log(prepared):
    cfg, tmp_path = prepared
    row = cli.cmd_train(cfg, size=2, algo="em", seed=0, n_x=8)
    assert row["error"] == ""
    assert row["param_count"] == (1 + 2) * 1 + 2 * 4
    name = "hmm_s2_nx8_em_seed0"
    run = tmp_path / "run"
    assert (run / "models" / f"{name}.model").exists()
    log = json.loads((run / "models" / f"{name}.log.json").read_text())
    trace = log["log_likelihood"]
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(trace, trace[1:]))


def test_train_markov_cell(prepared):
    cfg, tmp_path = prepared
    mk = ExperimentConfig.from_dict({**cfg.as_dict(), "model": "markov"})
    row = cli.cmd_train(mk, size=1, algo="mkn", seed=0, n_x=8)
    assert row["error"] == ""
    assert row["train_perplexity"] >= 1.0
    model, _ = model_io.load_model(tmp_path / "run" / "models" / "markov_s1_nx8_mkn_seed0.model")
    assert model.smoothing == "mkn"


def test_train_pcfg_with_hmm_initialization(prepared):
    cfg, tmp_path = prepared
    pc = ExperimentConfig.from_dict(
        {
            **cfg.as_dict(),
            "model": "pcfg",
            "pcfg_init": "hmm",
            "gs_samples": 5,
            "polish_iters": 3,
            "em_max_iter": 3,
        }
    )
    row = cli.cmd_train(pc, size=2, algo="em", seed=0, n_x=8)
    assert row["error"] == ""
    model, _ = model_io.load_model(tmp_path / "run" / "models" / "pcfg_s2_nx8_em_seed0.model")
    assert model.n_nonterminals == 2
    model.validate(tol=1e-9)


# ------------------------------------------------------------------- sweep


def test_sweep_grid_and_flags(prepared):
    cfg, tmp_path = prepared
    path = cli.cmd_sweep(cfg)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(cli.CSV_HEADER)
    rows = [dict(zip(cli.CSV_HEADER, ln.split(","))) for ln in lines[1:]]
    assert len(rows) == 2 * 2  # sizes {1,2} x seeds {0,1}
    for key in ("hmm",):
        for size in ("1", "2"):
            group = [r for r in rows if r["size"] == size]
            assert sum(int(r["best_by_train"]) for r in group) == 1
            assert sum(int(r["best_by_test"]) for r in group) == 1
    for r in rows:
        assert float(r["train_perplexity"]) >= 1.0
        assert 0.0 <= float(r["error_rate"]) <= 1.0
        assert float(r["rmrr"]) >= 1.0


def test_sweep_parallel_matches_serial(prepared):
    cfg, tmp_path = prepared
    serial = cli.cmd_sweep(cfg).read_text().splitlines()
    par_cfg = ExperimentConfig.from_dict({**cfg.as_dict(), "workers": 2})
    parallel = cli.cmd_sweep(par_cfg).read_text().splitlines()

    def strip_wall(rows):
        header = rows[0].split(",")
        wall = header.index("wall_time")
        return [",".join(c for i, c in enumerate(r.split(",")) if i != wall) for r in rows]

    # worker count is an execution detail: identical rows either way
    assert strip_wall(serial) == strip_wall(parallel)


def test_sweep_records_partial_failures(prepared, tmp_path):
    cfg, base = prepared
    # PCFG cells fail (test split contains sequences shorter than 2? no:
    # force failure through the length cap instead)
    bad = ExperimentConfig.from_dict(
        {
            **cfg.as_dict(),
            "model": "pcfg",
            "pcfg_max_length": 3,
            "sizes": [1],
            "seeds": [0],
            "em_max_iter": 2,
        }
    )
    path = cli.cmd_sweep(bad)
    lines = path.read_text().splitlines()
    rows = [dict(zip(cli.CSV_HEADER, ln.split(","))) for ln in lines[1:]]
    assert len(rows) == 1
    assert rows[0]["error"] != ""


# ----------------------------------------------------------------- analyze


def test_analyze_identity_emission_hmm(tmp_path):
    data = make_dataset(["a b a", "b a"], symbols=["a", "b"])
    m = markov.fit(data, order=1, smoothing="additive", epsilon=0.1)
    params = hmm.from_markov(m)
    vocab_path = tmp_path / "vocab.txt"
    data.vocab.save(vocab_path)
    model_path = tmp_path / "m.model"
    model_io.save_model(params, model_path, vocab_hash=data.vocab.content_hash())
    report = cli.cmd_analyze(str(model_path), str(vocab_path), threshold=0.05)
    assert report["kind"] == "hmm"
    assert report["info_measures"]["emission_perplexity"] == pytest.approx(1.0, abs=1e-9)
    assert report["threshold"] == 0.05


def test_analyze_two_state_hand_value(tmp_path):
    params = hmm.HmmParams(
        initial=np.array([0.5, 0.5]),
        transition=np.array([[0.9, 0.1], [0.5, 0.5]]),
        emission=np.eye(2),
    )
    vocab = Vocabulary(symbols=["a", "Other"])
    vocab.save(tmp_path / "v.txt")
    model_io.save_model(params, tmp_path / "m.model")
    report = cli.cmd_analyze(str(tmp_path / "m.model"), str(tmp_path / "v.txt"), 0.05)
    assert report["info_measures"]["stationary_perplexity"] == pytest.approx(1.5694, abs=1e-3)
    assert len(report["states"][0]["top_symbols"]) >= 1
    # only entries above the threshold are reported
    assert all(t["probability"] > 0.05 for t in report["transitions_above_threshold"])


def test_analyze_pcfg_report(tmp_path):
    g = pcfg.init_random(2, 2, seed=3)
    vocab = Vocabulary(symbols=["a", "Other"])
    vocab.save(tmp_path / "v.txt")
    model_io.save_model(g, tmp_path / "g.model")
    report = cli.cmd_analyze(str(tmp_path / "g.model"), str(tmp_path / "v.txt"), 0.05)
    assert report["kind"] == "pcfg"
    assert len(report["nonterminals"]) == 2
    assert all(r["probability"] > 0.05 for r in report["rules_above_threshold"])


def test_analyze_markov_rejected(tmp_path):
    data = make_dataset(["a b a"], symbols=["a", "b"])
    m = markov.fit(data, order=1)
    vocab = Vocabulary(symbols=["a", "b"])
    vocab.save(tmp_path / "v.txt")
    model_io.save_model(m, tmp_path / "m.model")
    with pytest.raises(ValueError):
        cli.cmd_analyze(str(tmp_path / "m.model"), str(tmp_path / "v.txt"), 0.05)


def test_analyze_vocab_hash_mismatch(tmp_path):
    params = hmm.init_random(2, 2, seed=0)
    model_io.save_model(params, tmp_path / "m.model", vocab_hash="deadbeef")
    Vocabulary(symbols=["a", "Other"]).save(tmp_path / "v.txt")
    with pytest.raises(ValueError):
        cli.cmd_analyze(str(tmp_path / "m.model"), str(tmp_path / "v.txt"), 0.05)


# ---------------------------------------------------------------- generate


def test_generate_hmm_requires_length(tmp_path):
    params = hmm.init_random(2, 2, seed=1)
    vocab = Vocabulary(symbols=["a", "Other"])
    vocab.save(tmp_path / "v.txt")
    model_io.save_model(params, tmp_path / "m.model")
    with pytest.raises(ValueError):
        cli.cmd_generate(str(tmp_path / "m.model"), str(tmp_path / "v.txt"), 3, 0, None)
    lines = cli.cmd_generate(str(tmp_path / "m.model"), str(tmp_path / "v.txt"), 3, 0, 5)
    again = cli.cmd_generate(str(tmp_path / "m.model"), str(tmp_path / "v.txt"), 3, 0, 5)
    assert lines == again
    assert len(lines) == 3
    assert all(len(ln.split()) == 5 for ln in lines)


def test_generate_pcfg_forbids_length_and_matches_mean(tmp_path):
    base = hmm.HmmParams(np.array([1.0]), np.array([[1.0]]), np.array([[1.0]]))
    g = pcfg.init_from_hmm(base, kappa=0.6, eta=0.0)
    vocab = Vocabulary(symbols=["C"])
    vocab.save(tmp_path / "v.txt")
    model_io.save_model(g, tmp_path / "g.model")
    with pytest.raises(ValueError):
        cli.cmd_generate(str(tmp_path / "g.model"), str(tmp_path / "v.txt"), 2, 0, 5)
    lines = cli.cmd_generate(str(tmp_path / "g.model"), str(tmp_path / "v.txt"), 3000, 0, None)
    mean = np.mean([len(ln.split()) for ln in lines])
    assert abs(mean - 6.0) < 0.5


# ----------------------------------------------------------- process-level


def test_cli_exit_codes_and_error_json(tmp_path):
    env_cmd = [sys.executable, "-m", "chordlm.cli"]
    bad = subprocess.run(
        env_cmd + ["prepare", "--corpus", str(tmp_path / "missing.txt"), "--out-dir", str(tmp_path / "r")],
        capture_output=True,
        text=True,
    )
    assert bad.returncode != 0
    err = json.loads(bad.stderr.strip().splitlines()[-1])
    assert "error" in err and "message" in err

    corpus = tmp_path / "c.txt"
    corpus.write_text("C G Am F\nF G C C G\n")
    good = subprocess.run(
        env_cmd
        + ["prepare", "--corpus", str(corpus), "--out-dir", str(tmp_path / "r2"), "--vocab-k", "2", "--test-count", "0"],
        capture_output=True,
        text=True,
    )
    assert good.returncode == 0, good.stderr
    assert json.loads(good.stdout)["vocab_size"] == 3
