"""Small encoder-decoder construction policy with hand-written backprop.

Parameters live in one flat vector split into a shared segment (the encoder)
and one segment per COP type (header + decoder). Every gradient produced
here is aligned with that flat layout so it can be sliced by segment.

Per COP type ``c`` with node inputs ``x_k``::

    e_k   = A_c x_k + a_c                     header
    h_k   = tanh(W_L ... tanh(W_1 e_k + b_1) ... + b_L)   shared encoder
    ctx   = mean_k h_k
    g     = [ctx, h_cur, state]               decoding context
    l_k   = h_k . (B_c g) + delta_c . phi_k   decoder score per action
    l_end = u_c . g + beta_c                  terminate score (KP only)

followed by a softmax restricted to feasible actions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envs import INPUT_DIMS, BatchState, Instance, TerminalState, make_state
from .tasks import ConfigurationError, Task, TaskRegistry

N_STATE = {"tsp": 1, "cvrp": 2, "op": 1, "kp": 1}
N_ACTION_FEATS = {"tsp": 2, "cvrp": 2, "op": 2, "kp": 2}


@dataclass(frozen=True)
class ModelSpec:
    hidden: int = 16
    depth: int = 2
    init_scale: float = 1.0
    input_dims: dict = field(default_factory=lambda: dict(INPUT_DIMS))

    def __post_init__(self):
        if self.hidden <= 0:
            raise ConfigurationError("hidden width must be positive")
        if self.depth < 1:
            raise ConfigurationError("encoder depth must be at least 1")
        if any(d <= 0 for d in self.input_dims.values()):
            raise ConfigurationError("input dimensions must be positive")


class Layout:
    """Maps ``(segment, tensor)`` names to slices of the flat vector."""

    def __init__(self, spec: ModelSpec, cops: Sequence[str]):
        self.spec = spec
        self.cops = tuple(cops)
        self.tensors: dict[tuple[str, str], tuple[slice, tuple[int, ...]]] = {}
        self.segments: dict[str, slice] = {}
        H = spec.hidden
        pos = 0

        def add(seg, name, shape):
            nonlocal pos
            size = int(np.prod(shape))
            self.tensors[(seg, name)] = (slice(pos, pos + size), tuple(shape))
            pos += size

        start = pos
        for layer in range(spec.depth):
            add("shared", f"W{layer}", (H, H))
            add("shared", f"b{layer}", (H,))
        self.segments["shared"] = slice(start, pos)
        for cop in self.cops:
            start = pos
            G = 2 * H + N_STATE[cop]
            add(cop, "A", (H, spec.input_dims[cop]))
            add(cop, "a", (H,))
            add(cop, "B", (H, G))
            add(cop, "delta", (N_ACTION_FEATS[cop],))
            if cop == "kp":
                add(cop, "u", (G,))
                add(cop, "beta", (1,))
            self.segments[cop] = slice(start, pos)
        self.size = pos

    def fan_in(self, seg: str, name: str) -> int:
        _, shape = self.tensors[(seg, name)]
        if name.startswith("W") or name in ("A", "B"):
            return shape[1]
        if name.startswith("b") or name == "a":
            return self.spec.hidden if seg == "shared" else self.spec.input_dims[seg]
        return shape[0]

    def mask(self, *segments: str) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        for s in segments:
            m[self.segments[s]] = True
        return m

    def __eq__(self, other):
        return isinstance(other, Layout) and self.tensors == other.tensors


class ParamStore:
    def __init__(self, layout: Layout, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (layout.size,):
            raise ValueError(f"expected {layout.size} parameters, got {flat.shape}")
        self.layout = layout
        self.flat = flat

    def view(self, seg: str, name: str) -> np.ndarray:
        sl, shape = self.layout.tensors[(seg, name)]
        return self.flat[sl].reshape(shape)

    def segment(self, seg: str) -> np.ndarray:
        return self.flat[self.layout.segments[seg]]

    def copy(self) -> "ParamStore":
        return ParamStore(self.layout, self.flat.copy())

    def replace(self, flat: np.ndarray) -> "ParamStore":
        return ParamStore(self.layout, flat)

    def __len__(self):
        return self.layout.size


@dataclass
class GradientVector:
    """Flat gradient aligned with a :class:`Layout`.

    ``scope`` is a COP name (gradient of a task of that COP, supported on the
    shared segment and that COP's segment) or ``"shared"``.
    """

    values: np.ndarray
    scope: str

    def __add__(self, other: "GradientVector") -> "GradientVector":
        scope = self.scope if self.scope == other.scope else "mixed"
        return GradientVector(self.values + other.values, scope)

    def __mul__(self, k: float) -> "GradientVector":
        return GradientVector(self.values * k, self.scope)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def init_params(spec: ModelSpec, registry: TaskRegistry, seed: int) -> ParamStore:
    layout = Layout(spec, registry.cops)
    rng = np.random.default_rng(seed)
    flat = np.empty(layout.size)
    for (seg, name), (sl, _) in layout.tensors.items():
        s = spec.init_scale / np.sqrt(layout.fan_in(seg, name))
        flat[sl] = rng.uniform(-s, s, size=sl.stop - sl.start)
    return ParamStore(layout, flat)


def project_shared(grad: GradientVector, layout: Layout) -> GradientVector:
    out = np.zeros_like(grad.values)
    sl = layout.segments["shared"]
    out[sl] = grad.values[sl]
    return GradientVector(out, "shared")


# ------------------------------------------------------------------ forward


def _encode(params: ParamStore, cop: str, X: np.ndarray):
    A, a = params.view(cop, "A"), params.view(cop, "a")
    h = X @ A.T + a
    acts = [h]
    for layer in range(params.layout.spec.depth):
        W, b = params.view("shared", f"W{layer}"), params.view("shared", f"b{layer}")
        h = np.tanh(h @ W.T + b)
        acts.append(h)
    return h, h.mean(axis=1), acts


def _masked_softmax(logits: np.ndarray, mask: np.ndarray):
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    return e / s, z - np.log(s)


@dataclass
class _Step:
    cur: np.ndarray
    g: np.ndarray
    q: np.ndarray
    phi: np.ndarray
    probs: np.ndarray
    actions: np.ndarray
    active: np.ndarray


@dataclass
class _Forward:
    task: Task
    state: BatchState
    emb: np.ndarray
    acts: list
    X: np.ndarray
    logp: np.ndarray
    steps: list = field(default_factory=list)


def _forward(params, task, instances, repeats, mode="sample", rng=None, actions=None, keep_trace=False):
    cop = task.cop
    state = make_state(task, instances, repeats)
    X = state.node_feats
    emb, ctx, acts = _encode(params, cop, X)
    Bm = params.view(cop, "B")
    delta = params.view(cop, "delta")
    H = emb.shape[-1]
    T, n = state.T, state.n_nodes
    ii = state.inst
    emb_t = emb[ii]
    ctx_t = ctx[ii]
    rows = np.arange(T)
    logp = np.zeros(T)
    fwd = _Forward(task, state, emb, acts, X, logp)
    k = 0
    while not state.done.all():
        active = ~state.done
        mask = state.mask()
        if not mask[active].any(axis=1).all():
            raise TerminalState("no feasible action for an unfinished construction")
        mask[~active, 0] = True
        cur = state.cur.copy()
        hc = np.where((cur >= 0)[:, None], emb_t[rows, np.maximum(cur, 0)], 0.0)
        g = np.concatenate([ctx_t, hc, state.state_feats()], axis=1)
        q = g @ Bm.T
        phi = state.action_feats()
        logits = phi @ delta
        logits[:, :n] += np.einsum("tnh,th->tn", emb_t, q)
        if state.has_terminate:
            logits[:, n] += g @ params.view(cop, "u") + params.view(cop, "beta")[0]
        probs, logprobs = _masked_softmax(logits, mask)
        if actions is not None:
            a = np.where(active, actions[:, k] if k < actions.shape[1] else -1, 0)
            if np.any(a[active] < 0):
                raise ValueError("replayed action sequence ended before completion")
        elif mode == "greedy":
            a = probs.argmax(axis=1)
        else:
            cum = np.cumsum(probs, axis=1)
            u = rng.random(T)
            a = (cum > u[:, None] * cum[:, -1:]).argmax(axis=1)
        logp += np.where(active, logprobs[rows, a], 0.0)
        if keep_trace:
            fwd.steps.append(_Step(cur, g, q, phi, probs, a, active))
        state.step(a)
        k += 1
    return fwd


def _scatter(x: np.ndarray, ii: np.ndarray, B: int) -> np.ndarray:
    T = len(ii)
    if T % B == 0 and np.array_equal(ii, np.repeat(np.arange(B), T // B)):
        return x.reshape((B, T // B) + x.shape[1:]).sum(axis=1)
    out = np.zeros((B,) + x.shape[1:])
    np.add.at(out, ii, x)
    return out


def _backward(params: ParamStore, fwd: _Forward, coef: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_t coef[t] * logp[t]`` w.r.t. the flat parameters."""
    layout = params.layout
    cop = fwd.task.cop
    state = fwd.state
    B, n, H = fwd.emb.shape
    ii = state.inst
    T = len(ii)
    rows = np.arange(T)
    Bm = params.view(cop, "B")
    emb_t = fwd.emb[ii]
    grad = np.zeros(layout.size)
    gv = lambda seg, name: grad[layout.tensors[(seg, name)][0]].reshape(layout.tensors[(seg, name)][1])
    dB, ddelta = gv(cop, "B"), gv(cop, "delta")
    d_emb_t = np.zeros((T, n, H))
    d_ctx_t = np.zeros((T, H))
    if state.has_terminate:
        u = params.view(cop, "u")
        du, dbeta = gv(cop, "u"), gv(cop, "beta")
    for st in fwd.steps:
        G = -st.probs
        G[rows, st.actions] += 1.0
        G *= (coef * st.active)[:, None]
        Gn = G[:, :n]
        dq = np.einsum("tn,tnh->th", Gn, emb_t)
        d_emb_t += Gn[:, :, None] * st.q[:, None, :]
        dB += dq.T @ st.g
        dg = dq @ Bm
        ddelta += np.einsum("ta,taf->f", G, st.phi)
        if state.has_terminate:
            Gt = G[:, n]
            du += Gt @ st.g
            dbeta += Gt.sum()
            dg += Gt[:, None] * u
        d_ctx_t += dg[:, :H]
        has = st.cur >= 0
        d_emb_t[rows[has], st.cur[has]] += dg[has, H : 2 * H]
    d_emb = _scatter(d_emb_t, ii, B) + _scatter(d_ctx_t, ii, B)[:, None, :] / n
    # encoder
    dh = d_emb
    for layer in reversed(range(layout.spec.depth)):
        h_out, h_in = fwd.acts[layer + 1], fwd.acts[layer]
        dz = dh * (1.0 - h_out * h_out)
        gv("shared", f"W{layer}")[...] += np.einsum("bnh,bnk->hk", dz, h_in)
        gv("shared", f"b{layer}")[...] += dz.sum(axis=(0, 1))
        dh = dz @ params.view("shared", f"W{layer}")
    gv(cop, "A")[...] += np.einsum("bnh,bnd->hd", dh, fwd.X)
    gv(cop, "a")[...] += dh.sum(axis=(0, 1))
    return grad


# ------------------------------------------------------------------ public


@dataclass
class Rollouts:
    """Sampled constructions; trajectories are instance-major (``repeats`` per instance)."""

    task: Task
    instances: list
    repeats: int
    actions: np.ndarray
    costs: np.ndarray
    logp: np.ndarray

    @property
    def solutions(self) -> list[list[int]]:
        return [[int(a) for a in row if a >= 0] for row in self.actions]

    def advantages(self) -> np.ndarray:
        c = self.costs.reshape(len(self.instances), self.repeats)
        return (c - c.mean(axis=1, keepdims=True)).ravel()


def _pad(seqs: list[list[int]]) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), -1, dtype=int)
    for r, s in enumerate(seqs):
        out[r, : len(s)] = s
    return out


def _to_rollouts(fwd: _Forward, instances, repeats) -> Rollouts:
    return Rollouts(fwd.task, list(instances), repeats, _pad(fwd.state.actions), fwd.state.costs(), fwd.logp.copy())


def forward_policy(params: ParamStore, task: Task, instance: Instance, partial: Sequence[int]) -> np.ndarray:
    """Action distribution after ``partial``; zero on infeasible actions."""
    state = make_state(task, [instance])
    for a in partial:
        state.step(np.array([a]))
    if state.done[0] or not state.mask()[0].any():
        raise TerminalState("no feasible action: construction already complete")
    emb, ctx, _ = _encode(params, task.cop, state.node_feats)
    cur = state.cur
    hc = emb[0, cur[0]][None] if cur[0] >= 0 else np.zeros((1, emb.shape[-1]))
    g = np.concatenate([ctx, hc, state.state_feats()], axis=1)
    q = g @ params.view(task.cop, "B").T
    logits = state.action_feats() @ params.view(task.cop, "delta")
    logits[:, : state.n_nodes] += np.einsum("nh,th->tn", emb[0], q)
    if state.has_terminate:
        logits[:, -1] += g @ params.view(task.cop, "u") + params.view(task.cop, "beta")[0]
    probs, _ = _masked_softmax(logits, state.mask())
    return probs[0]


def rollout(params, task, instance, mode="sample", rng=None) -> tuple[list[int], float]:
    """Construct one solution; returns ``(actions, sum_log_prob)``."""
    ro = sample_rollouts(params, task, [instance], 1, rng, mode=mode)
    return ro.solutions[0], float(ro.logp[0])


def sample_rollouts(params, task, instances, repeats=1, rng=None, mode="sample") -> Rollouts:
    if mode not in ("sample", "greedy"):
        raise ConfigurationError(f"unknown decoding mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ConfigurationError("sampling needs an rng")
    fwd = _forward(params, task, instances, repeats, mode=mode, rng=rng)
    return _to_rollouts(fwd, instances, repeats)


def surrogate_loss(params, rollouts: Rollouts, weights: np.ndarray) -> tuple[float, GradientVector]:
    """``mean_t weights[t] * logp_t`` for fixed action sequences, with its gradient."""
    fwd = _forward(params, rollouts.task, rollouts.instances, rollouts.repeats, actions=rollouts.actions, keep_trace=True)
    T = len(weights)
    loss = float(np.dot(weights, fwd.logp) / T)
    grad = _backward(params, fwd, np.asarray(weights, float) / T)
    return loss, GradientVector(grad, rollouts.task.cop)


def policy_gradient_loss(params, task, batch, n_rollouts, rng, return_rollouts=False):
    """REINFORCE loss with a per-instance mean-of-rollouts baseline.

    The loss is ``mean((cost - baseline) * sum_log_prob)`` over the batch and
    rollouts, where cost is signed so that lower is better for every COP.
    """
    if not batch:
        raise ConfigurationError("batch must be non-empty")
    if n_rollouts < 2:
        raise ConfigurationError("n_rollouts must be at least 2 for the shared baseline")
    fwd = _forward(params, task, batch, n_rollouts, mode="sample", rng=rng, keep_trace=True)
    ro = _to_rollouts(fwd, batch, n_rollouts)
    adv = ro.advantages()
    T = len(adv)
    loss = float(np.dot(adv, fwd.logp) / T)
    grad = GradientVector(_backward(params, fwd, adv / T), task.cop)
    if return_rollouts:
        return loss, grad, ro
    return loss, grad
