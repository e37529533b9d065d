"""A small verifiable-reward environment and an exactly differentiable policy.

Tasks are modular-arithmetic predicates over token sequences. The policy is
a table of logits indexed by (prompt bucket, previous token, next token), so
log-probabilities, entropies and gradients are all exact, and the pass
probability of a task is computed exactly by dynamic programming.

Token ``eos_token`` (default ``vocab_size - 1``) ends a response; it is part
of the sampled sequence but not of the content the verifier checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DIFFICULTIES = (0, 1, 2)


@dataclass(frozen=True)
class Task:
    """A verifier instance.

    difficulty 0: content contains token 0.
    difficulty 1: content is non-empty and its sum is ``target`` mod ``vocab_size``.
    difficulty 2: as 1, and the content has exactly ``length`` tokens.
    """

    prompt_id: int
    difficulty: int
    target: int = 0
    length: int = 0
    vocab_size: int = 16
    eos_token: Optional[int] = 15

    def content(self, tokens) -> list:
        tokens = [int(t) for t in tokens]
        if self.eos_token is not None and tokens and tokens[-1] == self.eos_token:
            tokens = tokens[:-1]
        return tokens

    def witness(self) -> list:
        """A content sequence that satisfies the verifier."""
        top = self.vocab_size - 1 if self.eos_token is not None else self.vocab_size
        top -= 1  # largest content token
        if self.difficulty == 0:
            return [0]
        n = self.length if self.difficulty == 2 else 1
        seq, rem = [0] * n, self.target
        for i in range(n - 1, -1, -1):
            seq[i] = min(rem, top)
            rem -= seq[i]
        while rem > 0:
            if self.difficulty == 2:
                raise ValueError("target not reachable at this length")
            seq.append(min(rem, top))
            rem -= seq[-1]
        return seq


def verify(task: Task, tokens) -> int:
    """Binary reward of a sampled sequence."""
    content = task.content(tokens)
    if task.eos_token is not None and task.eos_token in content:
        return 0
    if task.difficulty == 0:
        return int(0 in content)
    if not content or sum(content) % task.vocab_size != task.target:
        return 0
    if task.difficulty == 2 and len(content) != task.length:
        return 0
    return 1


def sample_task(rng: np.random.Generator, difficulty: int = 1, vocab_size: int = 16, max_len: int = 12,
                eos: bool = True) -> Task:
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty}")
    eos_token = vocab_size - 1 if eos else None
    target = int(rng.integers(vocab_size))
    length = 0
    if difficulty == 0:
        target = 0
    elif difficulty == 2:
        length = int(rng.integers(2, max_len + 1))
    prompt_id = target + vocab_size * length
    task = Task(prompt_id, difficulty, target, length, vocab_size, eos_token)
    w = task.witness()
    if len(w) > max_len or not verify(task, w):
        raise RuntimeError(f"generated an unsatisfiable task {task}")
    return task


def eval_tasks(difficulty: int, vocab_size: int = 16, max_len: int = 12, eos: bool = True) -> list:
    """A fixed evaluation set covering every target (and length) once."""
    eos_token = vocab_size - 1 if eos else None
    if difficulty == 0:
        return [Task(0, 0, 0, 0, vocab_size, eos_token)]
    lengths = range(2, max_len + 1) if difficulty == 2 else [0]
    return [Task(t + vocab_size * n, difficulty, t, n, vocab_size, eos_token)
            for n in lengths for t in range(vocab_size)]


@dataclass
class Rollout:
    tokens: np.ndarray
    logprobs: np.ndarray


@dataclass
class PolicyEval:
    logprobs: np.ndarray
    entropy: float
    grad: np.ndarray


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class SoftmaxPolicy:
    """Tabular softmax policy; ``context_order`` 1 conditions on the previous token."""

    vocab_size: int = 16
    context_order: int = 1
    max_len: int = 12
    n_prompts: int = 16
    eos_token: Optional[int] = 15
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.context_order not in (0, 1):
            raise ValueError("context_order must be 0 or 1")
        shape = (self.n_prompts, self.vocab_size + 1 if self.context_order else 1, self.vocab_size)
        if self.params is None:
            self.params = np.zeros(shape)
        else:
            self.params = np.array(self.params, dtype=np.float64)
            if self.params.shape != shape:
                raise ValueError(f"params must have shape {shape}, got {self.params.shape}")

    @classmethod
    def for_tasks(cls, vocab_size=16, context_order=1, max_len=12, eos=True, n_prompts=None):
        return cls(vocab_size, context_order, max_len, n_prompts or vocab_size,
                   vocab_size - 1 if eos else None)

    def copy(self) -> "SoftmaxPolicy":
        return SoftmaxPolicy(self.vocab_size, self.context_order, self.max_len, self.n_prompts,
                             self.eos_token, self.params.copy())

    @property
    def bos(self) -> int:
        return self.vocab_size

    def bucket(self, task: Task) -> int:
        return task.prompt_id % self.n_prompts

    def state_index(self, prev):
        prev = np.asarray(prev)
        return prev if self.context_order else np.zeros_like(prev)

    def states(self, tokens) -> np.ndarray:
        """Previous-token state for every position of a sequence."""
        tokens = np.asarray(tokens, dtype=np.int64)
        prev = np.concatenate([[self.bos], tokens[:-1]]) if len(tokens) else np.zeros(0, np.int64)
        return self.state_index(prev)

    def log_probs_at(self, buckets, states, tokens):
        """Log-probabilities of ``tokens`` and the full distributions at each state."""
        logp = _log_softmax(self.params[buckets, states])
        lp = np.take_along_axis(logp, np.asarray(tokens)[..., None], axis=-1)[..., 0]
        return lp, logp

    def scatter_grad(self, coef, buckets, states, tokens, logp) -> np.ndarray:
        """Gradient of ``sum(coef * logprob)`` with respect to ``params``."""
        g = -np.exp(logp) * np.asarray(coef)[:, None]
        g[np.arange(len(tokens)), tokens] += coef
        out = np.zeros_like(self.params)
        np.add.at(out, (buckets, states), g)
        return out

    def rollout_batch(self, task: Task, uniforms: np.ndarray) -> list:
        """Sample one sequence per row of ``uniforms`` (shape ``(n, max_len)``) by inverse CDF."""
        uniforms = np.atleast_2d(uniforms)
        n = uniforms.shape[0]
        table = _log_softmax(self.params[self.bucket(task)])
        cdf = np.cumsum(np.exp(table), axis=-1)
        prev = np.full(n, self.bos)
        alive = np.ones(n, dtype=bool)
        toks = np.zeros((n, self.max_len), dtype=np.int64)
        lps = np.zeros((n, self.max_len))
        lengths = np.zeros(n, dtype=np.int64)
        for t in range(self.max_len):
            s = self.state_index(prev)
            tok = (uniforms[:, t, None] >= cdf[s]).sum(axis=1)
            tok = np.minimum(tok, self.vocab_size - 1)
            toks[:, t] = tok
            lps[:, t] = table[s, tok]
            lengths += alive
            prev = tok
            if self.eos_token is not None:
                alive &= tok != self.eos_token
            if not alive.any():
                break
        return [Rollout(toks[i, :lengths[i]].copy(), lps[i, :lengths[i]].copy()) for i in range(n)]

    def pass_probability(self, task: Task) -> float:
        """Exact probability that a sampled response passes ``verify``."""
        V = self.vocab_size
        P = np.exp(_log_softmax(self.params[self.bucket(task)]))
        if not self.context_order:
            P = np.repeat(P, V + 1, axis=0)
        if task.difficulty == 0:
            n_aux = 2
            nxt = np.zeros((2, V), dtype=np.int64)
            nxt[0] = np.arange(V) == 0
            nxt[1] = 1
            good = np.array([False, True])
        else:
            n_aux = V
            nxt = (np.arange(V)[:, None] + np.arange(V)[None, :]) % V
            good = np.arange(V) == task.target
        mass = np.zeros((V + 1, n_aux))
        mass[self.bos, 0] = 1.0
        total = 0.0
        eos = self.eos_token
        tok_idx = np.broadcast_to(np.arange(V)[None, :], (n_aux, V))
        for t in range(self.max_len):
            M = P.T @ mass  # M[tok, aux]
            if eos is not None:
                if t > 0 and (task.difficulty != 2 or t == task.length):
                    total += M[eos, good].sum()
                M[eos] = 0.0
            new = np.zeros((V + 1, n_aux))
            np.add.at(new, (tok_idx.T, nxt.T), M)
            mass = new
        length_ok = task.difficulty != 2 or task.length == self.max_len
        if length_ok:
            total += mass[:, good].sum()
        return float(total)


def rollout(policy: SoftmaxPolicy, task: Task, rng: np.random.Generator) -> Rollout:
    return policy.rollout_batch(task, rng.random((1, policy.max_len)))[0]


def policy_eval(policy: SoftmaxPolicy, task: Task, tokens) -> PolicyEval:
    """Exact log-probabilities, mean per-step entropy and gradient of the summed log-probability."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if np.any((tokens < 0) | (tokens >= policy.vocab_size)):
        raise ValueError("token outside the vocabulary")
    states = policy.states(tokens)
    buckets = np.full(len(tokens), policy.bucket(task))
    lp, logp = policy.log_probs_at(buckets, states, tokens)
    entropy = float(-(np.exp(logp) * logp).sum(axis=-1).mean()) if len(tokens) else 0.0
    grad = policy.scatter_grad(np.ones(len(tokens)), buckets, states, tokens, logp)
    return PolicyEval(lp, entropy, grad)
