"""Disentangled dynamic graph attention.

Every (node, day) pair of a :class:`~invdyg.preprocess.DynamicGraph` is an
*event*. A layer lets each event attend over its dynamic neighborhood: the
out-neighbors of the node on every snapshot inside the history window, plus
the event itself. Two structural masks come out of one set of logits, a
softmax of the scaled scores for the invariant summary and a softmax of their
negation for the variant summary. A learnable featural mask further gates the
invariant messages.

The whole graph is processed at once. Attention is evaluated over a flat list
of (query event, key event) pairs with segment softmax, so the cost is linear
in the number of pairs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import Tensor, nn

from .datamodel import FeatureSchema
from .errors import ConfigError, DataValidationError, NumericalError
from .preprocess import DynamicGraph

DTYPE = torch.float64
TE_MODES = ("fixed-ladder", "learnable")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 8
    cat_embed_dim: int = 2
    n_layers: int = 2
    n_heads: int = 2
    history_window: int | None = None  # None: all earlier snapshots
    te_mode: str = "fixed-ladder"
    entangled: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1 or self.n_heads < 1 or self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} must be divisible by n_heads {self.n_heads}")
        if self.n_layers < 1 or self.cat_embed_dim < 1:
            raise ConfigError("n_layers and cat_embed_dim must be >= 1")
        if self.history_window is not None and self.history_window < 1:
            raise ConfigError("history_window must be >= 1 or None (all)")
        if self.te_mode not in TE_MODES:
            raise ConfigError(f"te_mode must be one of {TE_MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history_window"] = "all" if self.history_window is None else self.history_window
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("history_window") == "all":
            d["history_window"] = None
        return cls(**d)


def frequency_ladder(d: int) -> np.ndarray:
    """omega_k = 10000^(-(k-1)/d) for k = 1..d."""
    return 10000.0 ** (-np.arange(d) / d)


def temporal_encoding(t, omega) -> Tensor:
    """[sin(omega_1 t), ..., sin(omega_d t)]; ``t`` may be a scalar or a vector of times."""
    t = torch.as_tensor(t, dtype=DTYPE)
    omega = torch.as_tensor(omega, dtype=DTYPE)
    return torch.sin(t.unsqueeze(-1) * omega)


def segment_softmax(logits: Tensor, segment: Tensor, n_segments: int) -> Tensor:
    """Softmax of ``logits`` (pairs x heads) within groups sharing a ``segment`` id."""
    index = segment.unsqueeze(-1).expand_as(logits)
    peak = torch.full((n_segments, logits.shape[-1]), -math.inf, dtype=logits.dtype)
    peak = peak.scatter_reduce(0, index, logits.detach(), reduce="amax", include_self=True)
    e = torch.exp(logits - peak[segment])
    total = torch.zeros((n_segments, logits.shape[-1]), dtype=logits.dtype).index_add(0, segment, e)
    return e / total[segment]


def structural_masks(scores: Tensor, segment: Tensor, n_segments: int, key_dim: int) -> tuple[Tensor, Tensor]:
    """Invariant and variant masks from raw query-key dot products.

    ``m_inv = softmax(s / sqrt(key_dim))`` and ``m_var = softmax(-s / sqrt(key_dim))``
    over each query's neighborhood.
    """
    scaled = scores / math.sqrt(key_dim)
    return segment_softmax(scaled, segment, n_segments), segment_softmax(-scaled, segment, n_segments)


@dataclass
class GraphIndex:
    """Flat tensor view of a dynamic graph, built once per (graph, window)."""

    x: Tensor
    time: Tensor
    event_snapshot: np.ndarray
    event_node: list
    query: Tensor
    key: Tensor
    target_prev: Tensor
    target_event: Tensor
    y: Tensor
    y_raw: np.ndarray
    target_time: np.ndarray
    target_node: list
    target_env: list
    label_mean: float
    label_std: float
    n_events: int

    def unscale(self, pred: Tensor | np.ndarray) -> np.ndarray:
        p = pred.detach().cpu().numpy() if isinstance(pred, Tensor) else np.asarray(pred)
        return p * self.label_std + self.label_mean


def dynamic_neighborhood(graph: DynamicGraph, node: str, time: int, window: int | None = None) -> list[tuple[str, int]]:
    """All (neighbor, day) pairs that event (node, time) attends to, self pair last."""
    if graph.locate(node, time) is None:
        raise DataValidationError(f"node {node!r} is not present on day {time}")
    lo = -math.inf if window is None else time - window + 1
    out = []
    for snap in graph.snapshots:
        if not lo <= snap.time <= time:
            continue
        loc = graph.locate(node, snap.time)
        if loc is None:
            continue
        for v in snap.out_neighbors(loc[1]):
            out.append((snap.node_ids[v], snap.time))
    out.append((node, time))
    return out


def build_index(graph: DynamicGraph, window: int | None = None) -> GraphIndex:
    snaps = graph.snapshots
    offsets = np.cumsum([0] + [s.n_nodes for s in snaps])
    n_events = int(offsets[-1])
    node_ids = graph.node_ids()
    gid = {n: i for i, n in enumerate(node_ids)}
    # event_of[s][g] = event index of global node g in snapshot s, -1 if absent
    event_of = np.full((len(snaps), len(node_ids)), -1, dtype=np.int64)
    for si, s in enumerate(snaps):
        g = np.array([gid[n] for n in s.node_ids], dtype=np.int64)
        event_of[si, g] = offsets[si] + np.arange(s.n_nodes)

    queries, keys = [], []
    for si, s in enumerate(snaps):
        for sj in range(si + 1):
            if window is not None and snaps[sj].time < s.time - window + 1:
                continue
            e = snaps[sj].edges
            if not len(e):
                continue
            src_g = np.array([gid[snaps[sj].node_ids[i]] for i in e[:, 0]], dtype=np.int64)
            q = event_of[si, src_g]
            keep = q >= 0
            queries.append(q[keep])
            keys.append(offsets[sj] + e[keep, 1])
    self_events = np.arange(n_events)
    query = np.concatenate(queries + [self_events])
    key = np.concatenate(keys + [self_events])
    order = np.argsort(query, kind="stable")
    query, key = query[order], key[order]

    tprev, tevent, y_raw, ttime, tnode, tenv = [], [], [], [], [], []
    for si in range(1, len(snaps)):
        s = snaps[si]
        if s.context:
            continue
        for li, nid in enumerate(s.node_ids):
            prev = event_of[si - 1, gid[nid]]
            if prev < 0 or not s.label_mask[li]:
                continue
            tprev.append(prev)
            tevent.append(offsets[si] + li)
            y_raw.append(s.label[li])
            ttime.append(s.time)
            tnode.append(nid)
            tenv.append(None if s.env is None else s.env[li])

    target_idx = graph.schema.target_index
    mean = float(graph.scaler.mean[target_idx])
    std = float(graph.scaler.std[target_idx])
    y_raw = np.asarray(y_raw, dtype=np.float64)
    x = np.concatenate([s.features for s in snaps], axis=0) if snaps else np.zeros((0, 0))
    return GraphIndex(
        x=torch.as_tensor(x, dtype=DTYPE),
        time=torch.as_tensor(np.repeat([s.time for s in snaps], [s.n_nodes for s in snaps]), dtype=DTYPE),
        event_snapshot=np.repeat(np.arange(len(snaps)), [s.n_nodes for s in snaps]),
        event_node=[n for s in snaps for n in s.node_ids],
        query=torch.as_tensor(query, dtype=torch.long),
        key=torch.as_tensor(key, dtype=torch.long),
        target_prev=torch.as_tensor(np.asarray(tprev, dtype=np.int64)),
        target_event=torch.as_tensor(np.asarray(tevent, dtype=np.int64)),
        y=torch.as_tensor((y_raw - mean) / std, dtype=DTYPE),
        y_raw=y_raw,
        target_time=np.asarray(ttime, dtype=np.int64),
        target_node=tnode,
        target_env=tenv,
        label_mean=mean,
        label_std=std,
        n_events=n_events,
    )


@dataclass
class DisentangledState:
    """Per-layer invariant / variant summaries for every event.

    ``h[l]`` is the input of layer ``l``; ``h[l + 1] = z_inv[l] + z_var[l]``.
    """

    z_inv: list
    z_var: list
    h: list
    masks: list = field(default_factory=list)

    @property
    def final_inv(self) -> Tensor:
        return self.z_inv[-1]

    @property
    def final_var(self) -> Tensor:
        return self.z_var[-1]

    def with_final_var(self, z_var: Tensor) -> "DisentangledState":
        return replace(self, z_var=[*self.z_var[:-1], z_var])


class GatedFFN(nn.Module):
    """alpha * MLP(LayerNorm(x)) + (1 - alpha) * x with a learnable scalar gate."""

    def __init__(self, d: int):
        super().__init__()
        self.norm = nn.LayerNorm(d, dtype=DTYPE)
        self.mlp = nn.Sequential(nn.Linear(d, d, dtype=DTYPE), nn.GELU(), nn.Linear(d, d, dtype=DTYPE))
        self.alpha = nn.Parameter(torch.tensor(0.5, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return self.alpha * self.mlp(self.norm(x)) + (1.0 - self.alpha) * x


class DisentangledAttentionLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, entangled: bool = False):
        super().__init__()
        self.d, self.n_heads, self.d_head = d, n_heads, d // n_heads
        self.entangled = entangled
        self.query = nn.Linear(d, d, dtype=DTYPE)
        self.key = nn.Linear(d, d, dtype=DTYPE)
        self.value = nn.Linear(d, d, dtype=DTYPE)
        self.merge = nn.Linear(d, d, dtype=DTYPE)
        if entangled:
            self.register_buffer("feature_logits", torch.zeros(d, dtype=DTYPE))
        else:
            self.feature_logits = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.ffn = GatedFFN(d)

    @property
    def feature_mask(self) -> Tensor:
        return torch.softmax(self.feature_logits, dim=0)

    def forward(self, h: Tensor, te: Tensor, index: GraphIndex) -> tuple[Tensor, Tensor, tuple[Tensor, Tensor]]:
        M, H, dh = h.shape[0], self.n_heads, self.d_head
        x = h + te
        q = self.query(x)[index.query].view(-1, H, dh)
        k = self.key(x)[index.key].view(-1, H, dh)
        v = self.value(x)[index.key].view(-1, H, dh)
        scores = (q * k).sum(-1)
        m_inv, m_var = structural_masks(scores, index.query, M, dh)

        mf = self.feature_mask.view(H, dh)
        inv_msg = (m_inv.unsqueeze(-1) * (v * mf)).reshape(-1, self.d)
        z_inv = torch.zeros(M, self.d, dtype=h.dtype).index_add(0, index.query, inv_msg)
        z_inv = self.ffn(self.merge(z_inv) + h)
        if self.entangled:
            return z_inv, torch.zeros_like(z_inv), (m_inv, m_var)
        var_msg = (m_var.unsqueeze(-1) * v).reshape(-1, self.d)
        z_var = torch.zeros(M, self.d, dtype=h.dtype).index_add(0, index.query, var_msg)
        z_var = self.ffn(self.merge(z_var))
        return z_inv, z_var, (m_inv, m_var)


def _mlp_head(d: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, d, dtype=DTYPE), nn.GELU(), nn.Linear(d, 1, dtype=DTYPE))


class DisentangledDynamicGraphNet(nn.Module):
    """The learnable parameter set plus the forward pass.

    ``invariant_head`` reads final-layer invariant summaries only;
    ``mixed_head`` reads ``z_inv + sigmoid(z_var)`` and exists only in the
    disentangled variant.
    """

    def __init__(self, schema: FeatureSchema, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.schema, self.config = schema, config
        d = config.hidden_dim
        self.n_cont = len(schema.continuous_features)
        self.cardinalities = schema.cardinalities
        self.embeddings = nn.ParameterList(
            [nn.Parameter(torch.zeros(c, config.cat_embed_dim, dtype=DTYPE)) for c in self.cardinalities]
        )
        self.input_proj = nn.Linear(self.n_cont + config.cat_embed_dim * len(self.cardinalities), d, dtype=DTYPE)
        omega = torch.as_tensor(frequency_ladder(d), dtype=DTYPE)
        if config.te_mode == "learnable":
            self.omega = nn.Parameter(omega)
        else:
            self.register_buffer("omega", omega)
        self.layers = nn.ModuleList(
            [DisentangledAttentionLayer(d, config.n_heads, config.entangled) for _ in range(config.n_layers)]
        )
        self.invariant_head = _mlp_head(d)
        self.mixed_head = None if config.entangled else _mlp_head(d)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights, biases and embeddings."""
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.in_features)
                    for p in (module.weight, module.bias):
                        p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.fill_(0.0)
            for table in self.embeddings:
                bound = 1.0 / math.sqrt(table.shape[0])
                table.copy_(torch.rand(table.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
            for layer in self.layers:
                layer.ffn.alpha.fill_(0.5)
                layer.feature_logits.zero_()
            self.omega.copy_(torch.as_tensor(frequency_ladder(self.config.hidden_dim), dtype=DTYPE))

    def embed(self, x: Tensor) -> Tensor:
        """Scaled continuous block concatenated with categorical embeddings."""
        parts = [x[:, : self.n_cont]]
        offset = self.n_cont
        for table, card in zip(self.embeddings, self.cardinalities):
            parts.append(x[:, offset : offset + card] @ table)
            offset += card
        return torch.cat(parts, dim=1)

    def forward(self, index: GraphIndex, embedded: Tensor | None = None, check_finite: bool = True) -> DisentangledState:
        if embedded is None:
            embedded = self.embed(index.x)
        h = self.input_proj(embedded)
        te = temporal_encoding(index.time, self.omega)
        state = DisentangledState(z_inv=[], z_var=[], h=[h])
        for l, layer in enumerate(self.layers):
            z_inv, z_var, masks = layer(h, te, index)
            if check_finite:
                _check_finite(z_inv, index, l, "invariant")
                _check_finite(z_var, index, l, "variant")
            h = z_inv + z_var
            state.z_inv.append(z_inv)
            state.z_var.append(z_var)
            state.h.append(h)
            state.masks.append(masks)
        return state

    def predict_invariant(self, z_inv: Tensor) -> Tensor:
        return self.invariant_head(z_inv).squeeze(-1)

    def predict_mixed(self, z_inv: Tensor, z_var: Tensor) -> Tensor:
        if self.mixed_head is None:
            raise ConfigError("the entangled model has no mixed head")
        return self.mixed_head(z_inv + torch.sigmoid(z_var)).squeeze(-1)

    def predict(self, index: GraphIndex, state: DisentangledState | None = None) -> Tensor:
        """Scaled predictions for every scored target of ``index``, read from day t-1."""
        if state is None:
            state = self.forward(index)
        return self.predict_invariant(state.final_inv[index.target_prev])

    def variant_parameter_count(self) -> int:
        return 0 if self.mixed_head is None else sum(p.numel() for p in self.mixed_head.parameters())


def _check_finite(z: Tensor, index: GraphIndex, layer: int, branch: str) -> None:
    finite = torch.isfinite(z).all(dim=1)
    if bool(finite.all()):
        return
    e = int(torch.nonzero(~finite)[0, 0])
    raise NumericalError(
        f"non-finite {branch} activation at layer {layer}, node {index.event_node[e]!r}, day {int(index.time[e])}"
    )


def parameters_to_json(model: nn.Module) -> dict:
    return {
        name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
        for name, t in model.state_dict().items()
    }


def parameters_from_json(model: nn.Module, payload: dict) -> None:
    state = {name: torch.tensor(v["data"], dtype=DTYPE).reshape(v["shape"]) for name, v in payload.items()}
    model.load_state_dict(state)

