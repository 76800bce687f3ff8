"""Pure-numpy dynamic-programming kernels.

Fallback backend with the same API as the compiled extension.  All kernels
work on a left-to-right chain layout:

* ``log_obs``  (T, S) per-frame emission log-densities,
* ``log_self`` (S,)   self-loop log-probabilities,
* ``log_next`` (S,)   forward-arc log-probabilities; for the last state of a
  chain (or of each model in the loop layout) this is the exit arc, which is
  added to the path score after the final frame.

Paths enter at state 0 of a chain and must end in its last state.  Scores of
impossible configurations come back as ``-inf``; callers decide whether that
is an error.  Tie-breaking is fixed so results are reproducible: within a
chain the advancing predecessor wins over the self-loop, a fresh model entry
wins only if strictly better, and argmax over models picks the lowest index.
"""

import numpy as np

NEG_INF = -np.inf


def chain_forward(log_obs, log_self, log_next):
    """Total log-probability over all legal paths through a chain."""
    T, S = log_obs.shape
    alpha = np.full(S, NEG_INF)
    alpha[0] = log_obs[0, 0]
    for t in range(1, T):
        stay = alpha + log_self
        adv = np.empty(S)
        adv[0] = NEG_INF
        adv[1:] = alpha[:-1] + log_next[:-1]
        alpha = np.logaddexp(stay, adv) + log_obs[t]
    return alpha[S - 1] + log_next[S - 1]


def chain_viterbi(log_obs, log_self, log_next):
    """Best path through a chain.  Returns (states int32[T], score)."""
    T, S = log_obs.shape
    delta = np.full(S, NEG_INF)
    delta[0] = log_obs[0, 0]
    came_from_prev = np.zeros((T, S), dtype=bool)
    for t in range(1, T):
        stay = delta + log_self
        adv = np.empty(S)
        adv[0] = NEG_INF
        adv[1:] = delta[:-1] + log_next[:-1]
        take = adv >= stay  # tie: advancing predecessor wins
        came_from_prev[t] = take
        delta = np.where(take, adv, stay) + log_obs[t]
    score = delta[S - 1] + log_next[S - 1]
    states = np.empty(T, dtype=np.int32)
    s = S - 1
    for t in range(T - 1, -1, -1):
        states[t] = s
        if t > 0 and came_from_prev[t, s]:
            s -= 1
    return states, float(score)


def chain_forward_backward(log_obs, log_self, log_next):
    """Log-domain forward/backward lattices.

    Returns (log_alpha (T,S), log_beta (T,S), loglik).  The exit arc of the
    final state is folded into beta at the last frame, so
    ``log_alpha + log_beta - loglik`` are state occupancy log-posteriors.
    """
    T, S = log_obs.shape
    log_alpha = np.full((T, S), NEG_INF)
    log_alpha[0, 0] = log_obs[0, 0]
    for t in range(1, T):
        stay = log_alpha[t - 1] + log_self
        adv = np.empty(S)
        adv[0] = NEG_INF
        adv[1:] = log_alpha[t - 1, :-1] + log_next[:-1]
        log_alpha[t] = np.logaddexp(stay, adv) + log_obs[t]
    loglik = log_alpha[T - 1, S - 1] + log_next[S - 1]

    log_beta = np.full((T, S), NEG_INF)
    log_beta[T - 1, S - 1] = log_next[S - 1]
    for t in range(T - 2, -1, -1):
        stay = log_self + log_obs[t + 1] + log_beta[t + 1]
        adv = np.full(S, NEG_INF)
        adv[:-1] = log_next[:-1] + log_obs[t + 1, 1:] + log_beta[t + 1, 1:]
        log_beta[t] = np.logaddexp(stay, adv)
    return log_alpha, log_beta, float(loglik)


def loop_viterbi(log_obs, starts, lens, log_self, log_next, entry):
    """Best path through a free loop of left-to-right models.

    ``starts``/``lens`` give each model's slice of the concatenated state
    axis; ``entry[j]`` is an additive score applied every time model j is
    entered, including at the first frame.  Returns
    (model_idx int32[T], state_idx int32[T], score).
    """
    T, S = log_obs.shape
    n = len(starts)
    lasts = starts + lens - 1
    is_start = np.zeros(S, dtype=bool)
    is_start[starts] = True
    entry_state = np.full(S, NEG_INF)
    entry_state[starts] = entry

    delta = np.where(is_start, entry_state + log_obs[0], NEG_INF)
    # backpointer codes: 0 = self-loop, 1 = advance, 2 = model entry
    bp = np.zeros((T, S), dtype=np.int8)
    exit_model = np.zeros(T, dtype=np.int32)
    for t in range(1, T):
        stay = delta + log_self
        adv = np.empty(S)
        adv[0] = NEG_INF
        adv[1:] = delta[:-1] + log_next[:-1]
        adv[is_start] = NEG_INF
        exit_scores = delta[lasts] + log_next[lasts]
        best_k = int(np.argmax(exit_scores))
        enter = np.where(is_start, exit_scores[best_k] + entry_state, NEG_INF)

        best = np.where(adv >= stay, adv, stay)
        code = (adv >= stay).astype(np.int8)
        strictly_enter = enter > best
        best = np.where(strictly_enter, enter, best)
        code[strictly_enter] = 2
        bp[t] = code
        exit_model[t] = best_k
        delta = best + log_obs[t]

    finals = delta[lasts] + log_next[lasts]
    k = int(np.argmax(finals))
    score = float(finals[k])

    model_idx = np.empty(T, dtype=np.int32)
    state_idx = np.empty(T, dtype=np.int32)
    pos = lasts[k]
    cur = k
    for t in range(T - 1, -1, -1):
        model_idx[t] = cur
        state_idx[t] = pos - starts[cur]
        if t > 0:
            c = bp[t, pos]
            if c == 1:
                pos -= 1
            elif c == 2:
                cur = exit_model[t]
                pos = lasts[cur]
    return model_idx, state_idx, score
