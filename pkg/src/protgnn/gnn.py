"""Heterogeneous message passing over the tripartite graph.

Per layer ``k`` every node aggregates messages from its neighbors and
updates with weights specific to its own node type::

    a_u = sum_v m_v
    h_u = relu(W_type(u) @ [h_u ; a_u] + b_type(u))

Protein/peptide edges send ``relu(W_p @ [h_v ; S_uv] + b_p)`` and
peptide/PSM edges send ``E_uv * relu(W_m @ h_v + b_m)``. The same message
weights serve both directions of an edge type. Proteins are scored by a
linear head followed by a sigmoid.

Gradients are derived by hand (no autodiff framework); :func:`grad_check`
compares them against central finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import PEPTIDE_CODE, PROTEIN_CODE, TripartiteGraph

NODE_TYPES = ("pro", "pep", "psm")


class NumericFaultError(FloatingPointError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite values in layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class NetConfig:
    layers: int = 6
    hidden: int = 100
    lr: float = 1e-3
    seed: int = 0
    max_epochs: int = 1000

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def param_shapes(layers: int, hidden: int, feature_dim: int) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in their canonical (checkpoint) order."""
    h = hidden
    shapes = [
        ("psm_proj.W", (h, feature_dim)),
        ("psm_proj.b", (h,)),
        ("type_emb", (2, h)),
    ]
    for k in range(1, layers + 1):
        shapes += [
            (f"layer{k}.pep_pro.W", (h, h + 1)),
            (f"layer{k}.pep_pro.b", (h,)),
            (f"layer{k}.pep_psm.W", (h, h)),
            (f"layer{k}.pep_psm.b", (h,)),
        ]
        for t in NODE_TYPES:
            shapes += [(f"layer{k}.update_{t}.W", (h, 2 * h)), (f"layer{k}.update_{t}.b", (h,))]
    shapes += [("head.w", (h,)), ("head.b", (1,))]
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name == "type_emb":
        return shape[0]  # one-hot input over the two node types
    return shape[-1]


@dataclass(eq=False)
class ModelParams:
    """Ordered collection of named parameter tensors."""

    layers: int
    hidden: int
    feature_dim: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return [n for n, _ in param_shapes(self.layers, self.hidden, self.feature_dim)]

    def copy(self) -> "ModelParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return replace(self, tensors={k: np.zeros_like(v) for k, v in self.tensors.items()})

    def map(self, fn) -> "ModelParams":
        return replace(self, tensors={k: fn(k, v) for k, v in self.tensors.items()})

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def check_shapes(self) -> None:
        expected = param_shapes(self.layers, self.hidden, self.feature_dim)
        if list(self.tensors) != [n for n, _ in expected]:
            raise ValueError("parameter names or order differ from the declared layout")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def bitwise_equal(self, other: "ModelParams") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


ParamGrads = ModelParams


def init_params(config: NetConfig, feature_dim: int, seed: int | None = None) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    if feature_dim < 1:
        raise ValueError("feature_dim must be positive")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tensors = {}
    for name, shape in param_shapes(config.layers, config.hidden, feature_dim):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config.layers, config.hidden, feature_dim, tensors)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class NodeStates:
    """Hidden states of one layer, split by node type."""

    pro: np.ndarray
    pep: np.ndarray
    psm: np.ndarray

    def stacked(self) -> np.ndarray:
        """All rows in node order: proteins, peptides, PSMs."""
        return np.vstack([self.pro, self.pep, self.psm])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.pro).all() and np.isfinite(self.pep).all() and np.isfinite(self.psm).all())


def embed_inputs(graph: TripartiteGraph, params: ModelParams) -> NodeStates:
    W, b = params["psm_proj.W"], params["psm_proj.b"]
    if graph.feature_dim != W.shape[1]:
        raise ValueError(
            f"graph has {graph.feature_dim} PSM features, parameters expect {W.shape[1]}"
        )
    emb = params["type_emb"]
    return NodeStates(
        pro=np.tile(emb[PROTEIN_CODE], (graph.n_pro, 1)),
        pep=np.tile(emb[PEPTIDE_CODE], (graph.n_pep, 1)),
        psm=graph.psm_features @ W.T + b,
    )


def message_pep_pro(h_src: np.ndarray, s: np.ndarray | float, layer: int, params: ModelParams) -> np.ndarray:
    """Protein/peptide message; ``h_src`` may be one vector or a row stack."""
    W, b = params[f"layer{layer}.pep_pro.W"], params[f"layer{layer}.pep_pro.b"]
    return relu(h_src @ W[:, :-1].T + np.multiply.outer(s, W[:, -1]) + b)


def message_pep_psm(h_src: np.ndarray, e: np.ndarray | float, layer: int, params: ModelParams) -> np.ndarray:
    """Peptide/PSM message gated by the PSM edge weight."""
    W, b = params[f"layer{layer}.pep_psm.W"], params[f"layer{layer}.pep_psm.b"]
    return np.multiply(np.asarray(e)[..., None], relu(h_src @ W.T + b))


@dataclass
class _LayerCache:
    a_pro: np.ndarray
    a_pep: np.ndarray
    a_psm: np.ndarray
    on_pep_to_pro: np.ndarray  # relu masks, per protein/peptide edge
    on_pro_to_pep: np.ndarray
    on_pep_psm_pep: np.ndarray  # relu masks, per source node
    on_pep_psm_psm: np.ndarray


def _update(h: np.ndarray, a: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = h.shape[1]
    return relu(h @ W[:, :n].T + a @ W[:, n:].T + b)


def aggregate_update(
    graph: TripartiteGraph, states: NodeStates, layer: int, params: ModelParams, *, keep: bool = False
):
    """One message-passing layer. Returns the new states, plus the backward
    cache when ``keep`` is set.

    Incoming messages are summed in ascending edge order; a peptide adds
    its protein-edge sum and then its PSM-edge sum. Linear parts of the
    messages are computed once per source node and gathered onto edges,
    which gives the same values as :func:`message_pep_pro` and
    :func:`message_pep_psm` applied edge by edge.
    """
    pro_idx, pep_idx = graph.pro_pep[:, 0], graph.pro_pep[:, 1]
    psm_pep, psm_idx = graph.pep_psm[:, 0], graph.pep_psm[:, 1]
    E = graph.e_attr[:, None]
    k = layer

    Wp, bp = params[f"layer{k}.pep_pro.W"], params[f"layer{k}.pep_pro.b"]
    edge_part = np.multiply.outer(graph.s_attr, Wp[:, -1]) + bp
    z_pep_to_pro = (states.pep @ Wp[:, :-1].T)[pep_idx] + edge_part
    z_pro_to_pep = (states.pro @ Wp[:, :-1].T)[pro_idx] + edge_part

    Wm, bm = params[f"layer{k}.pep_psm.W"], params[f"layer{k}.pep_psm.b"]
    r_pep = relu(states.pep @ Wm.T + bm)
    r_psm = relu(states.psm @ Wm.T + bm)

    a_pro = graph.pro_incidence @ relu(z_pep_to_pro)
    a_pep = graph.pep_incidence_pro @ relu(z_pro_to_pep) + graph.pep_incidence_psm @ (E * r_psm[psm_idx])
    a_psm = graph.psm_incidence @ (E * r_pep[psm_pep])

    new = NodeStates(
        *(
            _update(h, a, params[f"layer{k}.update_{t}.W"], params[f"layer{k}.update_{t}.b"])
            for t, h, a in zip(NODE_TYPES, (states.pro, states.pep, states.psm), (a_pro, a_pep, a_psm))
        )
    )
    if not keep:
        return new
    cache = _LayerCache(
        a_pro, a_pep, a_psm, z_pep_to_pro > 0, z_pro_to_pep > 0, r_pep > 0, r_psm > 0
    )
    return new, cache


@dataclass
class ForwardResult:
    logits: np.ndarray
    states: list[NodeStates]
    caches: list[_LayerCache]

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)


def forward_full(graph: TripartiteGraph, params: ModelParams, *, keep: bool = True) -> ForwardResult:
    states = [embed_inputs(graph, params)]
    caches = []
    if not states[0].is_finite():
        raise NumericFaultError(0)
    for k in range(1, params.layers + 1):
        if keep:
            new, cache = aggregate_update(graph, states[-1], k, params, keep=True)
            caches.append(cache)
            states.append(new)
        else:
            states = [aggregate_update(graph, states[-1], k, params)]
        if not states[-1].is_finite():
            raise NumericFaultError(k)
    logits = states[-1].pro @ params["head.w"] + params["head.b"][0]
    if not np.isfinite(logits).all():
        raise NumericFaultError(params.layers + 1)
    return ForwardResult(logits, states, caches)


def forward_logits(graph: TripartiteGraph, params: ModelParams) -> np.ndarray:
    return forward_full(graph, params, keep=False).logits


def forward(graph: TripartiteGraph, params: ModelParams) -> np.ndarray:
    """Protein-group probabilities."""
    return sigmoid(forward_logits(graph, params))


def bce_loss(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None):
    """Mean binary cross entropy over ``mask``, evaluated from logits.

    Returns ``(loss, d loss / d logits)``; the gradient is zero off-mask.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.ones(logits.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty loss mask")
    z, y = logits[mask], labels[mask]
    # log(1 + e^z) - y z, stable for large |z|
    per_item = np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))
    grad = np.zeros_like(logits)
    grad[mask] = (sigmoid(z) - y) / n
    return float(per_item.sum() / n), grad


def backward(graph: TripartiteGraph, params: ModelParams, fwd: ForwardResult, dlogits: np.ndarray) -> ParamGrads:
    """Exact gradients of a scalar loss given its gradient w.r.t. the logits."""
    K = params.layers
    if len(fwd.states) != K + 1 or len(fwd.caches) != K:
        raise ValueError("forward pass was run without retained states")
    g = params.zeros_like()
    G = g.tensors
    h = params.hidden
    pro_idx, pep_idx = graph.pro_pep[:, 0], graph.pro_pep[:, 1]
    psm_pep, psm_idx = graph.pep_psm[:, 0], graph.pep_psm[:, 1]
    S, E = graph.s_attr, graph.e_attr[:, None]

    top = fwd.states[K]
    G["head.w"] += top.pro.T @ dlogits
    G["head.b"][0] += dlogits.sum()
    d_pro = np.outer(dlogits, params["head.w"])
    d_pep = np.zeros_like(top.pep)
    d_psm = np.zeros_like(top.psm)

    for k in range(K, 0, -1):
        below, out, c = fwd.states[k - 1], fwd.states[k], fwd.caches[k - 1]
        d_in, d_a = {}, {}
        for t, dh, h_in, a, h_out in (
            ("pro", d_pro, below.pro, c.a_pro, out.pro),
            ("pep", d_pep, below.pep, c.a_pep, out.pep),
            ("psm", d_psm, below.psm, c.a_psm, out.psm),
        ):
            W = params[f"layer{k}.update_{t}.W"]
            dz = dh * (h_out > 0)
            G[f"layer{k}.update_{t}.W"][:, :h] += dz.T @ h_in
            G[f"layer{k}.update_{t}.W"][:, h:] += dz.T @ a
            G[f"layer{k}.update_{t}.b"] += dz.sum(axis=0)
            d_in[t] = dz @ W[:, :h]
            d_a[t] = dz @ W[:, h:]

        # peptide/PSM messages: E-weighted sums back onto the source nodes
        Wm = params[f"layer{k}.pep_psm.W"]
        dr = (graph.pep_incidence_psm @ (d_a["psm"][psm_idx] * E)) * c.on_pep_psm_pep
        dq = (graph.psm_incidence @ (d_a["pep"][psm_pep] * E)) * c.on_pep_psm_psm
        G[f"layer{k}.pep_psm.W"] += dr.T @ below.pep + dq.T @ below.psm
        G[f"layer{k}.pep_psm.b"] += dr.sum(axis=0) + dq.sum(axis=0)
        d_in["pep"] += dr @ Wm
        d_in["psm"] += dq @ Wm

        # protein/peptide messages
        Wp = params[f"layer{k}.pep_pro.W"]
        dz_to_pro = d_a["pro"][pro_idx] * c.on_pep_to_pro
        dz_to_pep = d_a["pep"][pep_idx] * c.on_pro_to_pep
        d_src_pep = graph.pep_incidence_pro @ dz_to_pro
        d_src_pro = graph.pro_incidence @ dz_to_pep
        dz = dz_to_pro + dz_to_pep
        gWp = G[f"layer{k}.pep_pro.W"]
        gWp[:, :h] += d_src_pep.T @ below.pep + d_src_pro.T @ below.pro
        gWp[:, h] += dz.T @ S
        G[f"layer{k}.pep_pro.b"] += dz.sum(axis=0)
        d_in["pep"] += d_src_pep @ Wp[:, :h]
        d_in["pro"] += d_src_pro @ Wp[:, :h]

        d_pro, d_pep, d_psm = d_in["pro"], d_in["pep"], d_in["psm"]

    G["psm_proj.W"] += d_psm.T @ graph.psm_features
    G["psm_proj.b"] += d_psm.sum(axis=0)
    G["type_emb"][PROTEIN_CODE] += d_pro.sum(axis=0)
    G["type_emb"][PEPTIDE_CODE] += d_pep.sum(axis=0)
    return g


def loss_and_grads(graph: TripartiteGraph, params: ModelParams, labels, mask=None):
    fwd = forward_full(graph, params)
    loss, dlogits = bce_loss(fwd.logits, labels, mask)
    return loss, backward(graph, params, fwd, dlogits)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParams, **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.tensors.items()},
            v={k: np.zeros_like(v) for k, v in params.tensors.items()},
            **hyper,
        )


def adam_step(params: ModelParams, grads: ParamGrads, state: AdamState, lr: float = 1e-3):
    """Bias-corrected Adam update. Returns new ``(params, state)``; inputs are
    left untouched."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads.tensors[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_m[name], new_v[name] = m, v
        new_p[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return (
        replace(params, tensors=new_p),
        replace(state, m=new_m, v=new_v, t=t),
    )


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_tensor: str
    per_tensor: dict[str, float]
    tolerance: float
    kinks: list[tuple[str, tuple[int, ...], float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance or math.isinf(self.tolerance)

    @property
    def failing(self) -> list[str]:
        return [n for n, e in self.per_tensor.items() if not e < self.tolerance]


def relu_pattern(graph: TripartiteGraph, params: ModelParams) -> bytes:
    """Packed on/off state of every relu in a forward pass."""
    fwd = forward_full(graph, params)
    parts = []
    for c, st in zip(fwd.caches, fwd.states[1:]):
        parts += [c.on_pep_to_pro, c.on_pro_to_pep, c.on_pep_psm_pep, c.on_pep_psm_psm,
                  st.pro > 0, st.pep > 0, st.psm > 0]
    return np.packbits(np.concatenate([m.ravel() for m in parts])).tobytes()


def grad_check(
    graph: TripartiteGraph,
    params: ModelParams,
    labels,
    tolerance: float = 1e-4,
    *,
    step: float = 1e-4,
    floor: float = 1e-7,
    min_step: float = 1e-8,
    analytic: ParamGrads | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences entry by entry.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true gradient is ~0 from dividing round-off by zero.

    A central difference is only a valid reference where the loss is smooth
    on ``[x - step, x + step]``. When an entry disagrees and its interval
    flips some relu, the step is divided by ten until no relu flips (down
    to ``min_step``); such entries are listed in ``kinks`` with the step
    finally used.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if analytic is None:
        _, analytic = loss_and_grads(graph, params, labels)

    def loss_at(p):
        return bce_loss(forward_logits(graph, p), labels)[0]

    base = relu_pattern(graph, params)
    probe = params.copy()
    per_tensor, kinks = {}, []

    def central(x, idx, h, check=False):
        orig = x[idx]
        x[idx] = orig + h
        up = loss_at(probe)
        smooth = not check or relu_pattern(graph, probe) == base
        x[idx] = orig - h
        down = loss_at(probe)
        smooth = smooth and (not check or relu_pattern(graph, probe) == base)
        x[idx] = orig
        return (up - down) / (2 * h), smooth

    for name in params.names():
        x = probe.tensors[name]
        a = analytic.tensors[name]
        worst = 0.0
        for idx in np.ndindex(x.shape):
            num, _ = central(x, idx, step)
            err = abs(a[idx] - num) / max(abs(a[idx]), abs(num), floor)
            if not err < tolerance:
                h = step
                num, smooth = central(x, idx, h, check=True)
                while not smooth and h / 10 >= min_step:
                    h /= 10
                    num, smooth = central(x, idx, h, check=True)
                if h != step:
                    kinks.append((name, idx, h))
                err = abs(a[idx] - num) / max(abs(a[idx]), abs(num), floor)
            worst = max(worst, err)
        per_tensor[name] = worst
    worst_name = max(per_tensor, key=per_tensor.get)
    return GradCheckReport(per_tensor[worst_name], worst_name, per_tensor, tolerance, kinks)
