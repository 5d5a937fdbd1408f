import math

import numpy as np
import pytest

from chordlm import hmm, pcfg
from chordlm.hmm import HmmParams
from chordlm.pcfg import (
    START,
    DerivationTree,
    EmConfig,
    GibbsConfig,
    PcfgParams,
    PcfgPrior,
)
from oracles import (
    all_sequences,
    evidence_ratio_prediction,
    hmm_terminated_evidence,
    pcfg_evidence_by_enumeration,
    pcfg_outside_by_enumeration,
    random_stochastic,
)


def single_terminal_grammar(kappa=0.6) -> PcfgParams:
    """One nonterminal, one terminal: S -> zz surely; z emits with prob kappa."""
    base = HmmParams(
        initial=np.array([1.0]),
        transition=np.array([[1.0]]),
        emission=np.array([[1.0]]),
    )
    return pcfg.init_from_hmm(base, kappa=kappa, eta=0.0)


def random_grammar(rng, n_nt, vocab) -> PcfgParams:
    return pcfg.init_random(n_nt, vocab, seed=int(rng.integers(0, 2**31)))


def random_hmm(rng, n_states, vocab) -> HmmParams:
    return HmmParams(
        initial=random_stochastic(rng, (n_states,)),
        transition=random_stochastic(rng, (n_states, n_states)),
        emission=random_stochastic(rng, (n_states, vocab)),
    )


# ------------------------------------------------------------ constructors


def test_init_random_valid_and_deterministic():
    a = pcfg.init_random(3, 4, seed=5)
    b = pcfg.init_random(3, 4, seed=5)
    a.validate()
    assert not a.start_emits
    assert np.array_equal(a.rules, b.rules)
    assert np.array_equal(a.start_rules, b.start_rules)
    one = pcfg.init_random(1, 2, seed=0)
    assert one.start_rules[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_init_from_hmm_rows_exact_when_eta_zero():
    rng = np.random.default_rng(8)
    base = random_hmm(rng, 3, 4)
    g = pcfg.init_from_hmm(base, kappa=0.7, eta=0.0)
    g.validate(tol=1e-12)
    assert np.allclose(g.start_rules, base.initial[:, None] * base.transition, atol=1e-12)
    # left child equals the parent state when eta is zero
    for z in range(3):
        off = g.rules[z].copy()
        off[z, :] = 0.0
        assert np.all(off == 0.0)


def test_init_from_hmm_eta_renormalizes():
    rng = np.random.default_rng(9)
    base = random_hmm(rng, 2, 3)
    g = pcfg.init_from_hmm(base, kappa=0.6, eta=0.05)
    g.validate(tol=1e-12)
    assert np.all(g.rules > 0.0)


def test_init_from_hmm_mean_length_targets():
    # kappa chosen for the observed mean length of 13.0 symbols
    kappa = 0.5416
    assert 2 * kappa / (2 * kappa - 1) == pytest.approx(13.02, abs=0.01)
    with pytest.raises(ValueError):
        pcfg.init_from_hmm(random_hmm(np.random.default_rng(0), 2, 2), kappa=0.5, eta=0.0)
    with pytest.raises(ValueError):
        pcfg.init_from_hmm(random_hmm(np.random.default_rng(0), 2, 2), kappa=0.4, eta=0.0)


# ---------------------------------------------------------- strict embedding


def test_strict_embed_single_state_hand_value():
    base = HmmParams(np.array([1.0]), np.array([[1.0]]), np.array([[1.0]]))
    g = pcfg.strict_embed_hmm(base, end_prob=np.array([0.5]))
    g.validate(tol=1e-12)
    # the HMM emits "a a" then stops with probability 0.5 * 0.5
    got = math.exp(pcfg.inside(g, np.array([0, 0])).log_evidence)
    assert got == pytest.approx(0.25, rel=1e-12)


def test_strict_embed_length_one_reads_off_stop_marginal():
    rng = np.random.default_rng(3)
    base = random_hmm(rng, 2, 3)
    end = np.array([0.3, 0.6])
    g = pcfg.strict_embed_hmm(base, end)
    want = (base.initial * end) @ base.emission
    assert np.allclose(g.start_emissions, want, atol=1e-12)
    for x in range(3):
        got = math.exp(pcfg.inside(g, np.array([x])).log_evidence)
        assert got == pytest.approx(want[x], rel=1e-12)


def test_strict_embed_evidence_equality_exhaustive():
    rng = np.random.default_rng(14)
    base = random_hmm(rng, 2, 3)
    end = rng.uniform(0.2, 0.6, size=2)
    g = pcfg.strict_embed_hmm(base, end)
    g.validate(tol=1e-9)
    for length in range(1, 5):
        for seq in all_sequences(3, length):
            want = hmm_terminated_evidence(base.initial, base.transition, base.emission, end, seq)
            got = math.exp(pcfg.inside(g, seq).log_evidence)
            assert got == pytest.approx(want, rel=1e-9), seq


def test_strict_embed_validates_rows():
    base = HmmParams(np.array([1.0]), np.array([[0.9]]), np.array([[1.0]]))
    with pytest.raises(ValueError):
        pcfg.strict_embed_hmm(base, end_prob=np.array([0.5]))


# ------------------------------------------------------------------ inside


def test_inside_single_terminal_values():
    g = single_terminal_grammar(kappa=0.6)
    assert math.exp(pcfg.inside(g, np.array([0, 0])).log_evidence) == pytest.approx(0.36, rel=1e-12)
    assert math.exp(pcfg.inside(g, np.array([0, 0, 0])).log_evidence) == pytest.approx(
        2 * 0.4 * 0.6**3, rel=1e-12
    )


def test_inside_length_one_without_start_emission():
    g = single_terminal_grammar()
    assert pcfg.inside(g, np.array([0])).log_evidence == -np.inf


def test_inside_matches_tree_enumeration():
    rng = np.random.default_rng(21)
    for _ in range(10):
        g = random_grammar(rng, 2, 3)
        n = int(rng.integers(2, 5))
        seq = rng.integers(0, 3, size=n)
        want = pcfg_evidence_by_enumeration(
            g.start_rules, g.start_emissions, g.rules, g.emissions, seq
        )
        got = math.exp(pcfg.inside(g, seq).log_evidence)
        assert got == pytest.approx(want, rel=1e-12)


def test_inside_long_sequence_stays_finite():
    g = single_terminal_grammar(kappa=0.51)
    seq = np.zeros(200, dtype=np.int64)
    log_ev = pcfg.inside(g, seq).log_evidence
    assert np.isfinite(log_ev)


# ------------------------------------------------------------------ outside


def test_outside_hand_value():
    g = single_terminal_grammar(kappa=0.6)
    seq = np.array([0, 0])
    charts = pcfg.outside(g, seq, pcfg.inside(g, seq))
    a_00 = charts.outside[0, 0] * math.exp(charts.outside_scale[1])
    assert a_00[0] == pytest.approx(0.6, rel=1e-12)


def test_outside_leaf_band_identity():
    rng = np.random.default_rng(33)
    for _ in range(5):
        g = random_grammar(rng, 3, 2)
        seq = rng.integers(0, 2, size=6)
        charts = pcfg.outside(g, seq, pcfg.inside(g, seq))
        ev = math.exp(charts.log_evidence)
        joint_scale = math.exp(charts.outside_scale[1] + charts.inside_scale[1])
        for i in range(len(seq)):
            val = float(charts.outside[i, i] @ charts.inside[i, i]) * joint_scale
            assert val == pytest.approx(ev, rel=1e-9)


def test_outside_matches_enumeration():
    rng = np.random.default_rng(34)
    g = random_grammar(rng, 2, 2)
    seq = rng.integers(0, 2, size=4)
    charts = pcfg.outside(g, seq, pcfg.inside(g, seq))
    for i in range(4):
        for j in range(i, 4):
            w = j - i + 1
            if w == 4:
                continue
            scale = charts.outside_scale[w]
            for z in range(2):
                got = charts.outside[i, j, z] * (math.exp(scale) if np.isfinite(scale) else 0.0)
                want = pcfg_outside_by_enumeration(
                    g.start_rules, g.rules, g.emissions, seq, i, j, z
                )
                assert got == pytest.approx(want, rel=1e-9, abs=1e-15)


# ---------------------------------------------------------------------- EM


def test_em_single_terminal_fixed_point():
    g = single_terminal_grammar(kappa=0.7)  # start away from the fixed point
    seqs = [np.zeros(6, dtype=np.int64)]
    fitted, trace = pcfg.em_fit(g, seqs, EmConfig(max_iter=1))
    assert fitted.emissions[0, 0] == pytest.approx(0.6, abs=1e-12)
    assert fitted.rules[0, 0, 0] == pytest.approx(0.4, abs=1e-12)


def test_em_trace_monotone():
    rng = np.random.default_rng(40)
    seqs = [rng.integers(0, 3, size=int(rng.integers(2, 8))) for _ in range(8)]
    g = pcfg.init_random(2, 3, seed=4)
    fitted, trace = pcfg.em_fit(g, seqs, EmConfig(max_iter=40))
    for prev, cur in zip(trace, trace[1:]):
        assert cur >= prev - 1e-9 * abs(prev)
    fitted.validate(tol=1e-9)
    assert trace[-1] == pytest.approx(pcfg.log_evidence_total(fitted, seqs), abs=1e-9)


def test_em_emissions_decouple_for_single_nonterminal():
    rng = np.random.default_rng(41)
    seqs = [rng.integers(0, 2, size=5) for _ in range(6)]
    counts = np.bincount(np.concatenate(seqs), minlength=2).astype(float)
    g = pcfg.init_random(1, 2, seed=9)
    fitted, _ = pcfg.em_fit(g, seqs, EmConfig(max_iter=200))
    want = counts / counts.sum()
    emitted = fitted.emissions[0] / fitted.emissions[0].sum()
    assert np.allclose(emitted, want, atol=1e-6)


def test_em_rejects_bad_inputs():
    g = single_terminal_grammar()
    with pytest.raises(ValueError):
        pcfg.em_fit(g, [], EmConfig())
    with pytest.raises(ValueError):
        pcfg.em_fit(g, [np.zeros(1, dtype=np.int64)], EmConfig())
    with pytest.raises(ValueError):
        pcfg.em_fit(g, [np.zeros(65, dtype=np.int64)], EmConfig())
    base = HmmParams(np.array([1.0]), np.array([[1.0]]), np.array([[1.0]]))
    embedded = pcfg.strict_embed_hmm(base, np.array([0.5]))
    with pytest.raises(ValueError):
        pcfg.em_fit(embedded, [np.zeros(3, dtype=np.int64)], EmConfig())


def test_em_errors_on_zero_evidence_sequence():
    # grammar emits only symbol 0, sequence contains symbol 1
    g = single_terminal_grammar()
    g2 = PcfgParams(
        start_rules=g.start_rules,
        start_emissions=np.zeros(2),
        rules=g.rules,
        emissions=np.array([[0.6, 0.0]]),
    )
    with pytest.raises(ValueError, match="sequence 0"):
        pcfg.em_fit(g2, [np.array([0, 1])], EmConfig(max_iter=2))


# ------------------------------------------------------------------- Gibbs


def test_gibbs_tree_arithmetic():
    g = single_terminal_grammar()
    rng = np.random.default_rng(0)
    seq = np.zeros(7, dtype=np.int64)
    charts = pcfg.inside(g, seq)
    s, r, e = pcfg._sample_tree_from_charts(g, seq, charts, rng)
    assert s.sum() == 1.0
    assert r.sum() == len(seq) - 2
    assert e.sum() == len(seq)


def test_gibbs_rows_valid_every_iteration():
    rng = np.random.default_rng(1)
    seqs = [rng.integers(0, 2, size=int(rng.integers(2, 6))) for _ in range(5)]
    prior = PcfgPrior.symmetric(2, 2)
    params = pcfg.init_random(2, 2, seed=2)
    step_rng = np.random.default_rng(77)
    for _ in range(15):
        params = pcfg._gibbs_step(params, seqs, prior, step_rng)
        params.validate(tol=1e-9)
        assert not params.start_emits


def test_gibbs_deterministic_and_polish_improves():
    rng = np.random.default_rng(2)
    seqs = [rng.integers(0, 2, size=int(rng.integers(2, 6))) for _ in range(6)]
    prior = PcfgPrior.symmetric(2, 2)
    init = pcfg.init_random(2, 2, seed=3)
    cfg = GibbsConfig(n_samples=15, polish_iters=15, seed=5)
    fit1, trace1 = pcfg.gibbs_fit(init, seqs, prior, cfg)
    fit2, trace2 = pcfg.gibbs_fit(init, seqs, prior, cfg)
    assert np.array_equal(fit1.rules, fit2.rules)
    assert trace1.sample_log_evidence == trace2.sample_log_evidence
    assert trace1.polish_trace[0] == pytest.approx(trace1.best_sample_log_evidence, abs=1e-9)
    assert trace1.polish_trace[-1] >= trace1.best_sample_log_evidence - 1e-9


# ------------------------------------------------------- length distribution


def test_length_probability_single_terminal():
    g = single_terminal_grammar(kappa=0.6)
    assert pcfg.length_probability(g, 2) == pytest.approx(0.36, rel=1e-12)
    assert pcfg.length_probability(g, 3) == pytest.approx(0.1728, rel=1e-12)
    assert pcfg.length_probability(g, 1) == 0.0
    # tail mass: value cross-checked by generating-function iteration and
    # Monte Carlo; the distribution sums to 1 but has a subexponential tail
    total_30 = sum(pcfg.length_probability(g, n) for n in range(2, 31))
    assert total_30 == pytest.approx(0.980242, abs=1e-6)
    total_200 = sum(pcfg.length_probability(g, n) for n in range(2, 200))
    assert total_200 > 0.999


def test_length_probability_matches_string_sum():
    rng = np.random.default_rng(50)
    g = random_grammar(rng, 2, 2)
    for n in range(1, 6):
        want = sum(
            math.exp(pcfg.inside(g, seq).log_evidence)
            for seq in all_sequences(2, n)
            if pcfg.inside(g, seq).log_evidence > -np.inf
        )
        assert pcfg.length_probability(g, n) == pytest.approx(want, abs=1e-9)


def test_normalized_evidence_degenerate_and_sums_to_one():
    g = single_terminal_grammar(kappa=0.6)
    assert math.exp(pcfg.normalized_log_evidence(g, np.array([0, 0, 0]))) == pytest.approx(
        1.0, rel=1e-12
    )
    rng = np.random.default_rng(51)
    g2 = random_grammar(rng, 2, 2)
    for n in (2, 3, 4):
        total = sum(
            math.exp(pcfg.normalized_log_evidence(g2, seq)) for seq in all_sequences(2, n)
        )
        assert total == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        pcfg.normalized_log_evidence(g, np.array([0]))  # P(1) = 0 without start emission


# --------------------------------------------------------------- prediction


def test_predict_matches_evidence_ratio_oracle():
    rng = np.random.default_rng(60)
    for _ in range(6):
        g = random_grammar(rng, int(rng.integers(1, 4)), 3)
        seq = rng.integers(0, 3, size=int(rng.integers(2, 6)))
        for pos in range(1, len(seq) + 1):
            got = pcfg.predict_distribution(g, seq, pos)
            want = evidence_ratio_prediction(g, seq, pos)
            assert np.allclose(got, want, atol=1e-9)


def test_predict_single_terminal_degenerate():
    g = single_terminal_grammar()
    got = pcfg.predict_distribution(g, np.zeros(3, dtype=np.int64), 2)
    assert got.tolist() == [1.0]


def test_predict_requires_length_two():
    g = single_terminal_grammar()
    with pytest.raises(ValueError):
        pcfg.predict_distribution(g, np.zeros(1, dtype=np.int64), 1)


def test_predict_sums_to_one():
    g = pcfg.init_random(2, 4, seed=11)
    seq = np.array([0, 1, 2, 3])
    assert pcfg.predict_distribution(g, seq, 2).sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- sampling


def test_sample_tree_deterministic():
    # a linear-chain grammar is guaranteed subcritical, so sampling halts
    base = random_hmm(np.random.default_rng(12), 2, 3)
    g = pcfg.init_from_hmm(base, kappa=0.7, eta=0.01)
    t1, y1 = pcfg.sample_tree(g, seed=4)
    t2, y2 = pcfg.sample_tree(g, seed=4)
    assert np.array_equal(y1, y2)
    assert t1.to_bracketed() == t2.to_bracketed()


def test_sample_tree_counts_and_yield():
    g = single_terminal_grammar(kappa=0.6)
    tree, yield_ids = pcfg.sample_tree(g, seed=7)
    leaves, binaries = tree.count_nodes()
    assert leaves == len(yield_ids)
    assert binaries == leaves - 2


def test_sample_tree_depth_cap():
    # kappa just above 1/2 gives long spines; a tiny cap must trip
    g = single_terminal_grammar(kappa=0.51)
    with pytest.raises(RuntimeError):
        for seed in range(50):
            pcfg.sample_tree(g, seed=seed, max_expansions=3)


def test_sampled_trees_respect_linear_chain_structure():
    # eta = 0: every binary expansion keeps the parent state as its left child
    rng = np.random.default_rng(70)
    base = random_hmm(rng, 3, 4)
    g = pcfg.init_from_hmm(base, kappa=0.7, eta=0.0)
    for seed in range(30):
        tree, _ = pcfg.sample_tree(g, seed=seed)
        stack = [tree]
        while stack:
            node = stack.pop()
            if node.terminal is None:
                if node.head != START:
                    assert node.left.head == node.head
                stack.append(node.left)
                stack.append(node.right)


def test_canonical_comb_probability_matches_chain_product():
    # the comb with emitters as left children and the chain descending right
    # carries exactly the state-chain probability times kappa/1-kappa factors
    rng = np.random.default_rng(71)
    base = random_hmm(rng, 3, 4)
    kappa = 0.65
    g = pcfg.init_from_hmm(base, kappa=kappa, eta=0.0)
    states = [1, 0, 2, 1]
    symbols = [3, 0, 2, 2]
    n = len(states)

    node = DerivationTree(head=states[-1], terminal=symbols[-1])
    for t in range(n - 2, 0, -1):
        emitter = DerivationTree(head=states[t], terminal=symbols[t])
        node = DerivationTree(head=states[t], left=emitter, right=node)
    root = DerivationTree(
        head=START, left=DerivationTree(head=states[0], terminal=symbols[0]), right=node
    )
    assert root.yield_ids().tolist() == symbols

    chain = base.initial[states[0]] * base.emission[states[0], symbols[0]]
    for t in range(1, n):
        chain *= base.transition[states[t - 1], states[t]] * base.emission[states[t], symbols[t]]
    want = math.log(chain * kappa**n * (1 - kappa) ** (n - 2))
    assert pcfg.tree_log_probability(g, root) == pytest.approx(want, rel=1e-12)


def test_sample_tree_mean_length_and_length_marginal():
    g = single_terminal_grammar(kappa=0.6)
    lengths = np.array([len(pcfg.sample_tree(g, seed=s)[1]) for s in range(4000)])
    assert abs(lengths.mean() - 6.0) < 0.4  # sd ~ 7.75/sqrt(4000) ~ 0.12
    p2 = pcfg.length_probability(g, 2)
    freq2 = (lengths == 2).mean()
    sigma = math.sqrt(p2 * (1 - p2) / len(lengths))
    assert abs(freq2 - p2) <= 4 * sigma


def test_bracketed_export():
    g = single_terminal_grammar()
    tree, _ = pcfg.sample_tree(g, seed=0)
    text = tree.to_bracketed(symbols=["C"])
    assert text.startswith("(S ")
    assert "C" in text
