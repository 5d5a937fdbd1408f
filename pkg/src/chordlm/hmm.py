"""First-order hidden Markov models over encoded symbol sequences.

Provides scaled forward-backward inference, EM training, Bayesian training by
Gibbs sampling (blocked forward-filter backward-sample state draws alternated
with Dirichlet posterior parameter draws), symbol-wise prediction, generation,
embedding of first-order Markov models, and information-theoretic summaries of
the latent structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import EncodedDataset
from .markov import MarkovModel, _check_rows, _draw


@dataclass
class HmmParams:
    initial: np.ndarray     # (n_states,)
    transition: np.ndarray  # (n_states, n_states), row stochastic
    emission: np.ndarray    # (n_states, vocab_size), row stochastic

    @property
    def n_states(self) -> int:
        return len(self.initial)

    @property
    def vocab_size(self) -> int:
        return self.emission.shape[1]

    def validate(self, tol: float = 1e-9) -> None:
        _check_rows(self.initial, tol, "initial distribution")
        _check_rows(self.transition, tol, "transition matrix")
        _check_rows(self.emission, tol, "emission matrix")

    def log_evidence(self, seq: np.ndarray) -> float:
        return forward_backward(self, seq).log_evidence

    def predict_distribution(self, seq: np.ndarray, position: int) -> np.ndarray:
        return predict_distribution(self, seq, position)


@dataclass
class HmmPrior:
    """Dirichlet concentrations for the initial, transition, and emission rows."""

    initial: np.ndarray     # (n_states,)
    transition: np.ndarray  # (n_states, n_states)
    emission: np.ndarray    # (n_states, vocab_size)

    @classmethod
    def symmetric(cls, n_states: int, vocab_size: int, alpha: float = 0.1) -> "HmmPrior":
        if alpha <= 0:
            raise ValueError("Dirichlet concentration must be positive")
        return cls(
            initial=np.full(n_states, alpha),
            transition=np.full((n_states, n_states), alpha),
            emission=np.full((n_states, vocab_size), alpha),
        )


@dataclass
class FbTables:
    """Scaled forward-backward quantities for one sequence.

    ``alpha[n]`` is the filtered state distribution P(z_n | x_{1:n});
    ``beta[n]`` the scaled backward variable; ``scaling[n]`` the per-step
    normalizer P(x_n | x_{1:n-1}). The unscaled variables are recovered by
    multiplying cumulative products of the scaling factors.
    """

    alpha: np.ndarray    # (N, n_states)
    beta: np.ndarray     # (N, n_states)
    scaling: np.ndarray  # (N,)
    log_evidence: float

    def gamma(self) -> np.ndarray:
        """Posterior state marginals, one row per position."""
        return self.alpha * self.beta

    def xi(self, params: HmmParams, seq: np.ndarray) -> np.ndarray:
        """Posterior transition marginals for positions 1..N-1."""
        seq = np.asarray(seq)
        n = len(seq)
        out = np.empty((n - 1, params.n_states, params.n_states))
        for t in range(n - 1):
            weighted = params.emission[:, seq[t + 1]] * self.beta[t + 1] / self.scaling[t + 1]
            out[t] = self.alpha[t][:, None] * params.transition * weighted[None, :]
        return out


@dataclass
class EmConfig:
    max_iter: int = 500
    rel_tol: float = 1e-5


@dataclass
class GibbsConfig:
    n_samples: int = 500
    polish_iters: int = 50
    seed: int = 0
    rel_tol: float = 1e-5


@dataclass
class GibbsTrace:
    sample_log_evidence: list[float] = field(default_factory=list)
    polish_trace: list[float] = field(default_factory=list)

    @property
    def best_sample_log_evidence(self) -> float:
        return max(self.sample_log_evidence)


def init_random(n_states: int, vocab_size: int, seed: int) -> HmmParams:
    """Rows drawn from a flat Dirichlet, deterministically per seed."""
    if n_states < 1 or vocab_size < 1:
        raise ValueError("n_states and vocab_size must be >= 1")
    rng = np.random.default_rng(seed)
    return HmmParams(
        initial=_dirichlet_rows(rng, np.ones((1, n_states)))[0],
        transition=_dirichlet_rows(rng, np.ones((n_states, n_states))),
        emission=_dirichlet_rows(rng, np.ones((n_states, vocab_size))),
    )


def _dirichlet_rows(rng: np.random.Generator, concentration: np.ndarray) -> np.ndarray:
    draws = rng.standard_gamma(concentration)
    totals = draws.sum(axis=-1, keepdims=True)
    # a zero total cannot occur for concentrations >= ~1e-2 in practice, but
    # guard against it to keep rows proper
    bad = (totals == 0.0).reshape(-1)
    if bad.any():
        flat = draws.reshape(-1, draws.shape[-1])
        flat[bad] = 1.0
        totals = draws.sum(axis=-1, keepdims=True)
    return draws / totals


def forward_backward(params: HmmParams, seq: np.ndarray) -> FbTables:
    """Scaled forward-backward pass.

    Zero total evidence is signalled by ``log_evidence == -inf``; the tables
    are zero-filled from the first impossible step on.
    """
    seq = np.asarray(seq)
    n = len(seq)
    if n == 0:
        raise ValueError("sequence must be non-empty")
    k = params.n_states
    alpha = np.zeros((n, k))
    beta = np.zeros((n, k))
    scaling = np.zeros(n)

    probe = params.initial * params.emission[:, seq[0]]
    for t in range(n):
        if t > 0:
            probe = (alpha[t - 1] @ params.transition) * params.emission[:, seq[t]]
        c = probe.sum()
        scaling[t] = c
        if c == 0.0:
            return FbTables(alpha=alpha, beta=beta, scaling=scaling, log_evidence=-np.inf)
        alpha[t] = probe / c

    beta[n - 1] = 1.0
    for t in range(n - 2, -1, -1):
        beta[t] = (params.transition @ (params.emission[:, seq[t + 1]] * beta[t + 1])) / scaling[t + 1]
    return FbTables(alpha=alpha, beta=beta, scaling=scaling, log_evidence=float(np.log(scaling).sum()))


def _group_by_length(sequences: list[np.ndarray]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pack equal-length sequences into 2-d arrays for batched passes.

    Returns (indices, batch) pairs in ascending length order so every
    consumer walks the data in the same deterministic order.
    """
    by_len: dict[int, list[int]] = {}
    for i, seq in enumerate(sequences):
        by_len.setdefault(len(seq), []).append(i)
    groups = []
    for length in sorted(by_len):
        idx = np.asarray(by_len[length], dtype=np.int64)
        batch = np.stack([sequences[i] for i in idx])
        groups.append((idx, batch))
    return groups


def _forward_batch(params: HmmParams, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Filtered state distributions and scaling factors for an equal-length batch."""
    b, n = batch.shape
    k = params.n_states
    alpha = np.zeros((b, n, k))
    scaling = np.zeros((b, n))
    probe = params.initial[None, :] * params.emission[:, batch[:, 0]].T
    for t in range(n):
        if t > 0:
            probe = (alpha[:, t - 1] @ params.transition) * params.emission[:, batch[:, t]].T
        c = probe.sum(axis=1)
        scaling[:, t] = c
        ok = c > 0.0
        alpha[ok, t] = probe[ok] / c[ok, None]
    return alpha, scaling


def _backward_batch(params: HmmParams, batch: np.ndarray, scaling: np.ndarray) -> np.ndarray:
    b, n = batch.shape
    beta = np.zeros((b, n, params.n_states))
    beta[:, n - 1] = 1.0
    for t in range(n - 2, -1, -1):
        msg = params.emission[:, batch[:, t + 1]].T * beta[:, t + 1]
        beta[:, t] = (msg @ params.transition.T) / scaling[:, t + 1][:, None]
    return beta


def log_evidence_total(params: HmmParams, train: EncodedDataset | list[np.ndarray]) -> float:
    """Sum of sequence log evidences over a dataset."""
    sequences = train.sequences if isinstance(train, EncodedDataset) else train
    total = 0.0
    for _, batch in _group_by_length(sequences):
        _, scaling = _forward_batch(params, batch)
        if (scaling <= 0.0).any():
            return -np.inf
        total += float(np.log(scaling).sum())
    return total


def em_fit(
    params: HmmParams,
    train: EncodedDataset | list[np.ndarray],
    config: EmConfig = EmConfig(),
) -> tuple[HmmParams, list[float]]:
    """Maximum-likelihood training; returns the final parameters and the
    per-iteration log-likelihood trace (which ends at the returned model)."""
    sequences = train.sequences if isinstance(train, EncodedDataset) else train
    if len(sequences) == 0:
        raise ValueError("training data is empty")
    groups = _group_by_length(sequences)
    k, v = params.n_states, params.vocab_size

    trace: list[float] = []
    prev_ll = None
    for _ in range(config.max_iter):
        init_acc = np.zeros(k)
        trans_acc = np.zeros((k, k))
        emit_acc = np.zeros((k, v))
        ll = 0.0
        for idx, batch in groups:
            alpha, scaling = _forward_batch(params, batch)
            if (scaling <= 0.0).any():
                bad = idx[np.where((scaling <= 0.0).any(axis=1))[0][0]]
                raise ValueError(f"training sequence {int(bad)} has zero evidence")
            ll += float(np.log(scaling).sum())
            beta = _backward_batch(params, batch, scaling)
            gamma = alpha * beta
            init_acc += gamma[:, 0].sum(axis=0)
            n = batch.shape[1]
            for t in range(n - 1):
                weighted = params.emission[:, batch[:, t + 1]].T * beta[:, t + 1]
                weighted = weighted / scaling[:, t + 1][:, None]
                trans_acc += params.transition * (alpha[:, t].T @ weighted)
            flat_gamma = gamma.reshape(-1, k)
            flat_obs = batch.reshape(-1)
            emit_acc_t = np.zeros((v, k))
            np.add.at(emit_acc_t, flat_obs, flat_gamma)
            emit_acc += emit_acc_t.T
        trace.append(ll)
        if prev_ll is not None and abs(ll - prev_ll) <= config.rel_tol * abs(prev_ll):
            return params, trace
        prev_ll = ll
        params = HmmParams(
            initial=_normalize_rows(init_acc[None, :])[0],
            transition=_normalize_rows(trans_acc),
            emission=_normalize_rows(emit_acc),
        )
    trace.append(log_evidence_total(params, sequences))
    return params, trace


def _normalize_rows(acc: np.ndarray) -> np.ndarray:
    """Row normalization with uniform reset of zero-count rows."""
    totals = acc.sum(axis=-1, keepdims=True)
    out = np.where(totals > 0.0, acc / np.where(totals > 0.0, totals, 1.0), 1.0 / acc.shape[-1])
    return out


def _sample_states(
    params: HmmParams, batch: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Blocked draw of latent state paths: forward filter, backward sample."""
    alpha, scaling = _forward_batch(params, batch)
    if (scaling <= 0.0).any():
        raise ValueError("cannot sample states for a zero-evidence sequence")
    b, n = batch.shape
    states = np.empty((b, n), dtype=np.int64)
    states[:, n - 1] = _categorical_rows(rng, alpha[:, n - 1])
    for t in range(n - 2, -1, -1):
        w = alpha[:, t] * params.transition[:, states[:, t + 1]].T
        states[:, t] = _categorical_rows(rng, w)
    return states


def _categorical_rows(rng: np.random.Generator, weights: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(weights, axis=1)
    u = rng.random(weights.shape[0]) * cdf[:, -1]
    return (u[:, None] >= cdf).sum(axis=1)


def _gibbs_step(
    params: HmmParams,
    groups: list[tuple[np.ndarray, np.ndarray]],
    prior: HmmPrior,
    rng: np.random.Generator,
) -> HmmParams:
    """One sweep: draw state paths given parameters, then parameters given paths."""
    k, v = params.n_states, params.vocab_size
    init_counts = np.zeros(k)
    trans_counts = np.zeros((k, k))
    emit_counts = np.zeros((k, v))
    for _, batch in groups:
        states = _sample_states(params, batch, rng)
        init_counts += np.bincount(states[:, 0], minlength=k)
        if batch.shape[1] > 1:
            pairs = states[:, :-1].reshape(-1) * k + states[:, 1:].reshape(-1)
            trans_counts += np.bincount(pairs, minlength=k * k).reshape(k, k)
        cells = states.reshape(-1) * v + batch.reshape(-1)
        emit_counts += np.bincount(cells, minlength=k * v).reshape(k, v)
    return HmmParams(
        initial=_dirichlet_rows(rng, (prior.initial + init_counts)[None, :])[0],
        transition=_dirichlet_rows(rng, prior.transition + trans_counts),
        emission=_dirichlet_rows(rng, prior.emission + emit_counts),
    )


def gibbs_fit(
    params: HmmParams,
    train: EncodedDataset | list[np.ndarray],
    prior: HmmPrior,
    config: GibbsConfig = GibbsConfig(),
) -> tuple[HmmParams, GibbsTrace]:
    """Bayesian training: keep the maximum-evidence parameter sample from the
    Gibbs chain, then locally optimize it with a bounded EM polish."""
    sequences = train.sequences if isinstance(train, EncodedDataset) else train
    if len(sequences) == 0:
        raise ValueError("training data is empty")
    groups = _group_by_length(sequences)
    rng = np.random.default_rng(config.seed)

    trace = GibbsTrace()
    best, best_ll = None, -np.inf
    current = params
    for _ in range(config.n_samples):
        current = _gibbs_step(current, groups, prior, rng)
        ll = log_evidence_total(current, sequences)
        trace.sample_log_evidence.append(ll)
        if ll > best_ll:
            best, best_ll = current, ll
    polished, polish_trace = em_fit(
        best, sequences, EmConfig(max_iter=config.polish_iters, rel_tol=config.rel_tol)
    )
    trace.polish_trace = polish_trace
    return polished, trace


def predict_distribution(params: HmmParams, seq: np.ndarray, position: int) -> np.ndarray:
    """Distribution of the symbol at 1-based ``position`` given the others.

    Uses the filtered prefix messages and a backward pass normalized per step,
    both independent of the observed symbol at the queried position.
    """
    seq = np.asarray(seq)
    n = len(seq)
    if not 1 <= position <= n:
        raise ValueError(f"position {position} out of range [1, {n}]")
    i = position - 1

    # prefix filter up to i-1 (independent of seq[i])
    if i > 0:
        alpha, scaling = _forward_batch(params, seq[None, :i])
        if (scaling <= 0.0).any():
            raise ValueError("no symbol has positive probability at this position")
        prefix = alpha[0, i - 1]
        state_in = prefix @ params.transition
    else:
        state_in = params.initial

    # suffix messages, self-normalized so they never divide by prefix scalings
    beta = np.ones(params.n_states)
    for t in range(n - 2, i - 1, -1):
        beta = params.transition @ (params.emission[:, seq[t + 1]] * beta)
        total = beta.sum()
        if total > 0.0:
            beta = beta / total

    probs = (state_in * beta) @ params.emission
    total = probs.sum()
    if total <= 0.0:
        raise ValueError("no symbol has positive probability at this position")
    return probs / total


def from_markov(model: MarkovModel) -> HmmParams:
    """Embed a first-order Markov model: states are the symbols themselves and
    each state deterministically emits its own symbol."""
    if model.order != 1:
        raise ValueError("only first-order Markov models embed into an HMM")
    n = model.vocab_size
    return HmmParams(
        initial=model.initial_tables[0].copy(),
        transition=model.transitions.copy(),
        emission=np.eye(n),
    )


def stationary_distribution(
    params: HmmParams, tol: float = 1e-12, max_iter: int = 10**6
) -> np.ndarray:
    """Fixed point of the transition matrix by power iteration from the
    uniform distribution."""
    k = params.n_states
    p = np.full(k, 1.0 / k)
    for _ in range(max_iter):
        nxt = p @ params.transition
        residual = float(np.abs(nxt - p).max())
        if residual < tol:
            return nxt
        p = nxt
    raise RuntimeError(
        f"stationary distribution did not converge within {max_iter} iterations "
        f"(residual {residual:.3g}); the transition matrix may be periodic"
    )


@dataclass(frozen=True)
class InfoMeasures:
    """Exponentiated-entropy summaries of an HMM's latent structure."""

    stationary_perplexity: float   # effective number of used states
    emission_perplexity: float     # average symbols per state
    state_variety: float           # average states per symbol
    transition_perplexity: float   # average reachable states per state

    def as_dict(self) -> dict[str, float]:
        return {
            "stationary_perplexity": self.stationary_perplexity,
            "emission_perplexity": self.emission_perplexity,
            "state_variety": self.state_variety,
            "transition_perplexity": self.transition_perplexity,
        }


def _entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats with the 0 * log 0 = 0 convention."""
    p = np.asarray(p)
    mask = p > 0.0
    return float(-(p[mask] * np.log(p[mask])).sum())


def info_measures(params: HmmParams) -> InfoMeasures:
    stat = stationary_distribution(params)

    p_state = float(np.exp(_entropy(stat)))

    emit_entropies = np.array([_entropy(row) for row in params.emission])
    p_emit = float(np.exp(stat @ emit_entropies))

    symbol_marginal = stat @ params.emission
    joint = stat[:, None] * params.emission
    variety_exponent = 0.0
    for x in range(params.vocab_size):
        px = symbol_marginal[x]
        if px > 0.0:
            variety_exponent += px * _entropy(joint[:, x] / px)
    variety = float(np.exp(variety_exponent))

    trans_entropies = np.array([_entropy(row) for row in params.transition])
    p_trans = float(np.exp(stat @ trans_entropies))

    return InfoMeasures(p_state, p_emit, variety, p_trans)


def sample_sequence(params: HmmParams, length: int, seed: int) -> np.ndarray:
    """Ancestral sampling of a symbol sequence of the given length."""
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    out = np.empty(length, dtype=np.int64)
    state = _draw(rng, params.initial)
    out[0] = _draw(rng, params.emission[state])
    for t in range(1, length):
        state = _draw(rng, params.transition[state])
        out[t] = _draw(rng, params.emission[state])
    return out
