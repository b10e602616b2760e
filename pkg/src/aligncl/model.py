"""Multi-exit transformer encoder.

Token ids go through ``n_layers`` pre-norm encoder blocks; exit ``m`` (1-based)
reads the residual stream after block ``m`` and produces a sample
representation plus class logits. Column ``k`` of an exit's classifier weight
is the embedding of class ``k``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor

CLS_ID = 0
PAD_ID = 1
UNK_ID = 2
INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int = 64
    n_classes: int = 3
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    d_exit: int = 64
    exit_heads: int = 2
    max_seq_len: int = 32
    dropout: float = 0.1
    exit_kind: str = "mha"

    def validate(self) -> "ModelConfig":
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the reserved tokens")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.n_layers < 1:
            raise ValueError("n_layers must be at least 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_exit % self.exit_heads:
            raise ValueError("d_exit must be divisible by exit_heads")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.exit_kind not in ("mha", "linear"):
            raise ValueError(f"unknown exit_kind {self.exit_kind!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d).validate()


def _trunc_normal(rng: np.random.Generator, shape, std=INIT_STD) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class MultiExitModel:
    """Parameters live in ``self.params`` in registration order; names are
    ``embed.*``, ``layer.<m>.*`` and ``exit.<m>.*`` with ``m`` counted from 1."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.params: dict[str, Tensor] = {}
        self.stage1_complete = False
        self.meta: dict = {}
        self._build(np.random.default_rng(seed))

    # -- construction --

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _build(self, rng):
        c = self.config
        d = c.d_model
        self._add("embed.token", _trunc_normal(rng, (c.vocab_size, d)))
        self._add("embed.position", _trunc_normal(rng, (c.max_seq_len, d)))
        for m in range(1, c.n_layers + 1):
            p = f"layer.{m}"
            self._add(f"{p}.ln1.gamma", np.ones(d))
            self._add(f"{p}.ln1.beta", np.zeros(d))
            for w in ("q", "k", "v", "o"):
                self._add(f"{p}.attn.w{w}", _trunc_normal(rng, (d, d)))
                self._add(f"{p}.attn.b{w}", np.zeros(d))
            self._add(f"{p}.ln2.gamma", np.ones(d))
            self._add(f"{p}.ln2.beta", np.zeros(d))
            self._add(f"{p}.ffn.w1", _trunc_normal(rng, (d, c.d_ff)))
            self._add(f"{p}.ffn.b1", np.zeros(c.d_ff))
            self._add(f"{p}.ffn.w2", _trunc_normal(rng, (c.d_ff, d)))
            self._add(f"{p}.ffn.b2", np.zeros(d))
        for m in range(1, c.n_layers + 1):
            p = f"exit.{m}"
            width = d
            self._add(f"{p}.ln.gamma", np.ones(d))
            self._add(f"{p}.ln.beta", np.zeros(d))
            if c.exit_kind == "mha":
                de = c.d_exit
                self._add(f"{p}.down.w", _trunc_normal(rng, (d, de)))
                self._add(f"{p}.down.b", np.zeros(de))
                for w in ("q", "k", "v", "o"):
                    self._add(f"{p}.attn.w{w}", _trunc_normal(rng, (de, de)))
                    self._add(f"{p}.attn.b{w}", np.zeros(de))
                width = de
            self._add(f"{p}.classifier.w", _trunc_normal(rng, (width, c.n_classes)))
            self._add(f"{p}.classifier.b", np.zeros(c.n_classes))

    # -- parameter scopes --

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def rep_dim(self) -> int:
        return self.config.d_exit if self.config.exit_kind == "mha" else self.config.d_model

    def _check_layer(self, m: int) -> None:
        if not 1 <= m <= self.n_layers:
            raise ValueError(f"exit layer {m} outside 1..{self.n_layers}")

    def param_names(self, scope: str = "all") -> list[str]:
        """Names in ``scope``: ``all``, ``backbone``, ``exit:<m>`` or ``stage1``
        (backbone plus the last exit). Joined scopes use ``+``."""
        names: list[str] = []
        for part in scope.split("+"):
            if part == "all":
                sel = list(self.params)
            elif part == "backbone":
                sel = [n for n in self.params if not n.startswith("exit.")]
            elif part == "stage1":
                sel = self.param_names(f"backbone+exit:{self.n_layers}")
            elif part.startswith("exit:"):
                m = int(part[5:])
                self._check_layer(m)
                sel = [n for n in self.params if n.startswith(f"exit.{m}.")]
            else:
                raise ValueError(f"unknown parameter scope {part!r}")
            names.extend(n for n in sel if n not in names)
        order = {n: i for i, n in enumerate(self.params)}
        return sorted(names, key=order.__getitem__)

    def count_params(self, scope: str = "all") -> int:
        return int(np.sum([self.params[n].data.size for n in self.param_names(scope)]))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError("state dict does not match model parameters")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)

    # -- forward --

    def _attention(self, prefix: str, x_q: Tensor, x_kv: Tensor, n_heads: int,
                   key_bias: np.ndarray, train: bool, rng) -> Tensor:
        P = self.params
        n, lq, width = x_q.shape
        lk = x_kv.shape[1]
        dh = width // n_heads

        def heads(x, which, length):
            y = T.add(T.matmul(x, P[f"{prefix}.w{which}"]), P[f"{prefix}.b{which}"])
            return T.swapaxes(T.reshape(y, (n, length, n_heads, dh)), 1, 2)

        q = heads(x_q, "q", lq)
        k = heads(x_kv, "k", lk)
        v = heads(x_kv, "v", lk)
        scores = T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), 1.0 / np.sqrt(dh))
        probs = T.softmax(T.add_const(scores, key_bias))
        probs = T.dropout(probs, self.config.dropout, rng, train)
        ctx = T.reshape(T.swapaxes(T.matmul(probs, v), 1, 2), (n, lq, width))
        return T.add(T.matmul(ctx, P[f"{prefix}.wo"]), P[f"{prefix}.bo"])

    @staticmethod
    def key_bias(ids: np.ndarray) -> np.ndarray:
        """Additive attention bias of shape N x 1 x 1 x L masking padded keys."""
        return np.where(ids == PAD_ID, T.MASK_VALUE, 0.0)[:, None, None, :]

    def check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError("token ids must form an N x L matrix")
        if ids.shape[1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds {self.config.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError("token id out of range")
        return ids.astype(np.int64)

    def embed(self, ids: np.ndarray, train: bool = False, rng=None) -> Tensor:
        P = self.params
        positions = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        x = T.add(T.embedding(P["embed.token"], ids), T.embedding(P["embed.position"], positions))
        return T.dropout(x, self.config.dropout, rng, train)

    def block(self, m: int, x: Tensor, ids: np.ndarray, train: bool = False, rng=None) -> Tensor:
        """Pre-norm encoder block ``m`` applied to the residual stream ``x``."""
        P, c = self.params, self.config
        p = f"layer.{m}"
        h = T.layer_norm(x, P[f"{p}.ln1.gamma"], P[f"{p}.ln1.beta"])
        a = self._attention(f"{p}.attn", h, h, c.n_heads, self.key_bias(ids), train, rng)
        x = T.add(x, T.dropout(a, c.dropout, rng, train))
        h = T.layer_norm(x, P[f"{p}.ln2.gamma"], P[f"{p}.ln2.beta"])
        f = T.gelu(T.add(T.matmul(h, P[f"{p}.ffn.w1"]), P[f"{p}.ffn.b1"]))
        f = T.add(T.matmul(f, P[f"{p}.ffn.w2"]), P[f"{p}.ffn.b2"])
        return T.add(x, T.dropout(f, c.dropout, rng, train))

    def encode(self, ids, train: bool = False, rng: np.random.Generator | None = None,
               upto: int | None = None) -> list[Tensor]:
        """Hidden states after blocks 1..``upto`` (default all), each N x L x d_model.

        Blocks beyond ``upto`` are not evaluated.
        """
        ids = self.check_ids(ids)
        upto = self.n_layers if upto is None else upto
        self._check_layer(upto)
        x = self.embed(ids, train, rng)
        hidden = []
        for m in range(1, upto + 1):
            x = self.block(m, x, ids, train, rng)
            hidden.append(x)
        return hidden

    def exit_forward(self, m: int, hidden: Tensor, ids, train: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Exit ``m`` on block-``m`` hidden states: returns (representation, logits).

        MHA exits: layer-norm, down-project, tanh, self-attention, take [CLS],
        tanh. Only the [CLS] query row is computed since no other row is consumed.
        """
        self._check_layer(m)
        ids = np.asarray(ids)
        c, P = self.config, self.params
        if hidden.ndim != 3 or hidden.shape[2] != c.d_model or hidden.shape[:2] != ids.shape:
            raise ValueError(f"hidden states {hidden.shape} do not match ids {ids.shape}")
        p = f"exit.{m}"
        # the pre-norm residual stream is unnormalised; the exit reads it through its own norm
        hidden = T.layer_norm(hidden, P[f"{p}.ln.gamma"], P[f"{p}.ln.beta"])
        if c.exit_kind == "linear":
            rep = T.slice_(hidden, (slice(None), 0, slice(None)))
        else:
            x = T.tanh(T.add(T.matmul(hidden, P[f"{p}.down.w"]), P[f"{p}.down.b"]))
            cls = T.slice_(x, (slice(None), slice(0, 1), slice(None)))
            out = self._attention(f"{p}.attn", cls, x, c.exit_heads, self.key_bias(ids), train, rng)
            rep = T.tanh(T.reshape(out, (hidden.shape[0], c.d_exit)))
        logits = T.add(T.matmul(rep, P[f"{p}.classifier.w"]), P[f"{p}.classifier.b"])
        return rep, logits

    def label_embedding_tensor(self, m: int) -> Tensor:
        """Class embeddings of exit ``m`` as a K x d tensor on the tape."""
        self._check_layer(m)
        return T.transpose(self.params[f"exit.{m}.classifier.w"])

    def label_embeddings(self, m: int) -> np.ndarray:
        """Copy of exit ``m``'s class embeddings, K x d."""
        self._check_layer(m)
        return self.params[f"exit.{m}.classifier.w"].data.T.copy()

    def forward(self, ids, exits: Iterable[int] | None = None, train: bool = False,
                rng: np.random.Generator | None = None) -> dict[int, tuple[Tensor, Tensor]]:
        """Run the encoder up to the deepest requested exit; return {m: (rep, logits)}."""
        exits = sorted(set(range(1, self.n_layers + 1) if exits is None else exits))
        hidden = self.encode(ids, train=train, rng=rng, upto=exits[-1])
        return {m: self.exit_forward(m, hidden[m - 1], ids, train=train, rng=rng) for m in exits}


def flops_breakdown(config: ModelConfig, m: int, seq_len: int | None = None) -> dict[str, int]:
    """Per-sequence multiply-accumulate counts, by component, through exit ``m``.

    Embedding lookups cost no multiplications.
    """
    c = config
    if not 1 <= m <= c.n_layers:
        raise ValueError(f"exit layer {m} outside 1..{c.n_layers}")
    L = c.max_seq_len if seq_len is None else seq_len
    d = c.d_model
    per_layer = {
        "projections": 4 * L * d * d,
        "attention": 2 * L * L * d,
        "ffn": 2 * L * d * c.d_ff,
    }
    if c.exit_kind == "mha":
        de = c.d_exit
        exit_cost = L * d * de + 2 * L * de * de + 2 * de * de + 2 * L * de + de * c.n_classes
    else:
        exit_cost = d * c.n_classes
    out = {"embedding": 0}
    out.update({k: v * m for k, v in per_layer.items()})
    out["exit"] = exit_cost
    return out


def count_flops(config: ModelConfig, m: int, seq_len: int | None = None) -> int:
    return int(sum(flops_breakdown(config, m, seq_len).values()))
