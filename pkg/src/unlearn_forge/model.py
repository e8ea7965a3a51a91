"""Tiny decoder-only transformer over bytes, with exact gradients.

The model is a pre-norm GPT: learned token and position embeddings, causal
multi-head attention, GELU MLP, final layer norm and an untied output head.
Parameters live in plain numpy arrays (:class:`ModelParams`); gradients come
from :mod:`unlearn_forge.autograd`.

Sequence functions (``sequence_cross_entropy`` and friends) accept either a
``ModelParams`` (returns a float) or a ``BoundParams`` obtained from
:func:`watch` (returns a differentiable ``Var``).
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autograd import Tape, TapeStateError, Var, embedding, layer_norm

PAD, BOS, EOS = 256, 257, 258
VOCAB_SIZE = 259

_DTYPES = {"single": np.float32, "double": np.float64}


class SequenceLengthError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointHeaderError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class Vocabulary:
    """Byte-level vocabulary: ids 0-255 are bytes, then PAD, BOS, EOS."""

    size = VOCAB_SIZE
    pad, bos, eos = PAD, BOS, EOS
    specials = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>"}

    @staticmethod
    def encode(text: "str | bytes") -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return list(text)

    @staticmethod
    def decode(ids, errors: str = "replace") -> str:
        return Vocabulary.decode_bytes(ids).decode("utf-8", errors=errors)

    @staticmethod
    def decode_bytes(ids) -> bytes:
        ids = list(ids)
        if any(not 0 <= i < VOCAB_SIZE for i in ids):
            raise ValueError("token id out of range")
        return bytes(i for i in ids if i < 256)


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 128
    ffn_mult: float = 4.0
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")
        if self.n_layers < 0 or self.embed_dim < 1:
            raise ValueError("invalid model size")

    @property
    def ffn_dim(self) -> int:
        return int(round(self.ffn_mult * self.embed_dim))

    def param_shapes(self) -> "OrderedDict[str, tuple]":
        d, f, V = self.embed_dim, self.ffn_dim, VOCAB_SIZE
        shapes = OrderedDict(tok_emb=(V, d), pos_emb=(self.context_len, d))
        for i in range(self.n_layers):
            p = f"h{i}."
            shapes.update({
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
                p + "attn.w_o": (d, d), p + "attn.b_o": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
                p + "mlp.w_in": (d, f), p + "mlp.b_in": (f,),
                p + "mlp.w_out": (f, d), p + "mlp.b_out": (d,),
            })
        shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, V), "head.b": (V,)})
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, np.ndarray]", precision: str = "single"):
        if precision not in _DTYPES:
            raise ValueError(f"precision must be 'single' or 'double', got {precision!r}")
        self.config = config
        self.precision = precision
        self.tensors = tensors
        expected = config.param_shapes()
        if list(expected) != list(tensors):
            raise CheckpointShapeError("parameter names do not match config")
        for name, shape in expected.items():
            if tensors[name].shape != tuple(shape):
                raise CheckpointShapeError(f"{name}: shape {tensors[name].shape} != expected {tuple(shape)}")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()), self.precision)

    def astype(self, precision: str) -> "ModelParams":
        dt = _DTYPES[precision]
        return ModelParams(self.config, OrderedDict((k, v.astype(dt)) for k, v in self.tensors.items()), precision)

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(v).astype(v.dtype.newbyteorder("<")).tobytes()
                        for v in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


class BoundParams:
    """Parameters exposed as leaves of a tape."""

    def __init__(self, params: ModelParams, tape: Tape):
        self.params = params
        self.config = params.config
        self.tape = tape
        self.vars = OrderedDict((k, tape.leaf(v, k)) for k, v in params.tensors.items())

    def __getitem__(self, name) -> Var:
        return self.vars[name]


class Gradients:
    """Per-parameter gradient tensors mirroring a ``ModelParams``."""

    def __init__(self, params: ModelParams):
        self.tensors = OrderedDict((k, np.zeros_like(v)) for k, v in params.tensors.items())

    def __getitem__(self, name):
        return self.tensors[name]

    def zero(self):
        for v in self.tensors.values():
            v.fill(0)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.tensors.values()])

    def global_norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(v.astype(np.float64) ** 2)) for v in self.tensors.values())))


def init_params(config: ModelConfig, precision: str = "single") -> ModelParams:
    rng = np.random.default_rng(config.seed)
    std = config.init_std
    resid_std = std / math.sqrt(2 * max(config.n_layers, 1))
    tensors = OrderedDict()
    for name, shape in config.param_shapes().items():
        if name.endswith(".g"):
            t = np.ones(shape)
        elif name.endswith((".b", "b_qkv", "b_o", "b_in", "b_out")) and len(shape) == 1:
            t = np.zeros(shape)
        elif name.endswith(("w_o", "w_out")):
            t = rng.normal(0.0, resid_std, size=shape)
        else:
            t = rng.normal(0.0, std, size=shape)
        tensors[name] = t.astype(_DTYPES[precision])
    return ModelParams(config, tensors, precision)


def watch(params: ModelParams, tape: Tape | None = None) -> BoundParams:
    """Bind parameters to a (new) recording tape."""
    return BoundParams(params, tape if tape is not None else Tape())


def _bind(params) -> BoundParams:
    if isinstance(params, BoundParams):
        return params
    return BoundParams(params, Tape(record=False))


def _finish(params, v: Var):
    return v if isinstance(params, BoundParams) else float(v.data)


# ---------------------------------------------------------------------------
# forward pass


def forward_logprobs(bp: BoundParams, inputs: np.ndarray) -> Var:
    """Log-softmax outputs ``(B, T, V)`` for integer inputs ``(B, T)``."""
    cfg = bp.config
    inputs = np.asarray(inputs)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    B, T = inputs.shape
    if T > cfg.context_len:
        raise SequenceLengthError(f"sequence of {T} tokens exceeds context_len={cfg.context_len}")
    d, H = cfg.embed_dim, cfg.n_heads
    hd = d // H
    h = embedding(bp["tok_emb"], inputs) + bp["pos_emb"][:T]
    scale = 1.0 / math.sqrt(hd)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        a = layer_norm(h, bp[p + "ln1.g"], bp[p + "ln1.b"])
        qkv = (a @ bp[p + "attn.w_qkv"] + bp[p + "attn.b_qkv"])
        qkv = qkv.reshape(B, T, 3, H, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ((q @ k.transpose(0, 1, 3, 2)) * scale).causal_softmax()
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        h = h + (o @ bp[p + "attn.w_o"] + bp[p + "attn.b_o"])
        m = layer_norm(h, bp[p + "ln2.g"], bp[p + "ln2.b"])
        m = (m @ bp[p + "mlp.w_in"] + bp[p + "mlp.b_in"]).gelu()
        h = h + (m @ bp[p + "mlp.w_out"] + bp[p + "mlp.b_out"])
    h = layer_norm(h, bp["ln_f.g"], bp["ln_f.b"])
    logits = h @ bp["head.w"] + bp["head.b"]
    return logits.log_softmax()


def forward(params, tokens) -> np.ndarray:
    """Next-token distributions for every position of ``tokens``.

    Row ``i`` is the model's distribution over token ``i`` given ``tokens[:i]``
    (a BOS token is prepended internally), so row ``i`` never depends on
    ``tokens[i:]``.  Returns a ``(len(tokens), V)`` float array of
    probabilities.
    """
    tokens = list(tokens)
    if not tokens:
        return np.zeros((0, VOCAB_SIZE))
    if len(tokens) > params.config.context_len:
        raise SequenceLengthError(f"sequence of {len(tokens)} tokens exceeds context_len")
    inputs = np.array([BOS] + tokens[:-1])
    lp = forward_logprobs(_bind(params), inputs[None, :])
    return np.exp(lp.data[0])


def next_token_logprobs(params, prefix) -> np.ndarray:
    """Log-distribution of the token following ``prefix``."""
    prefix = list(prefix)
    if len(prefix) + 1 > params.config.context_len:
        raise SequenceLengthError("prefix fills the context window")
    lp = forward_logprobs(_bind(params), np.array([BOS] + prefix)[None, :])
    return lp.data[0, -1]


@dataclass
class PackedBatch:
    """Right-padded ``(B, T)`` batch of prompt/response pairs.

    ``mask[b, t]`` is 1 where position ``t`` predicts a response token.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    resp_len: np.ndarray


def pack_pairs(pairs, context_len: int | None = None) -> PackedBatch:
    pairs = [(list(x), list(y)) for x, y in pairs]
    if not pairs:
        raise ContractError("empty batch")
    for x, y in pairs:
        if not y:
            raise ContractError("response must be non-empty")
        if context_len is not None and len(x) + len(y) > context_len:
            raise SequenceLengthError(
                f"prompt+response of {len(x) + len(y)} tokens exceeds context_len={context_len}")
    T = max(len(x) + len(y) for x, y in pairs)
    B = len(pairs)
    inputs = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    for b, (x, y) in enumerate(pairs):
        seq = [BOS] + x + y
        n = len(seq) - 1
        inputs[b, :n] = seq[:-1]
        targets[b, :n] = seq[1:]
        mask[b, len(x):n] = 1.0
    return PackedBatch(inputs, targets, mask, np.array([len(y) for _, y in pairs], dtype=np.float64))


def response_logprobs(bp: BoundParams, batch: PackedBatch):
    """Per-position log-prob of the true token (masked) and the full log-softmax."""
    lp = forward_logprobs(bp, batch.inputs)
    tok = lp.take_last(batch.targets) * batch.mask.astype(lp.data.dtype)
    return tok, lp


def batch_sequence_log_prob(bp: BoundParams, batch: PackedBatch) -> Var:
    tok, _ = response_logprobs(bp, batch)
    return tok.sum(axis=1)


def batch_avg_correct_prob(bp: BoundParams, batch: PackedBatch) -> Var:
    tok, _ = response_logprobs(bp, batch)
    m = batch.mask.astype(tok.data.dtype)
    probs = tok.exp() * m
    return probs.sum(axis=1) / batch.resp_len.astype(tok.data.dtype)


def _pair(params, prompt, response):
    response = list(response)
    if not response:
        raise ContractError("response must be non-empty")
    bp = _bind(params)
    return bp, pack_pairs([(prompt, response)], bp.config.context_len)


def sequence_log_prob(params, prompt, response):
    """``sum_i log h(x, y_<i)[y_i]`` over the response tokens."""
    bp, batch = _pair(params, prompt, response)
    return _finish(params, batch_sequence_log_prob(bp, batch)[0])


def sequence_cross_entropy(params, prompt, response):
    """Summed next-token cross-entropy over the response (prompt positions ignored)."""
    bp, batch = _pair(params, prompt, response)
    return _finish(params, -batch_sequence_log_prob(bp, batch)[0])


def avg_correct_prob(params, prompt, response):
    """Arithmetic mean of the probabilities of the true response tokens."""
    bp, batch = _pair(params, prompt, response)
    return _finish(params, batch_avg_correct_prob(bp, batch)[0])


def token_logprobs(params, prompt, response) -> np.ndarray:
    """Log-probability of each response token (no gradient)."""
    bp, batch = _pair(params, prompt, response)
    tok, _ = response_logprobs(bp, batch)
    n = len(list(prompt))
    return tok.data[0, n:n + len(list(response))].astype(np.float64)


# ---------------------------------------------------------------------------
# gradients and optimisation


def backward(params: ModelParams, tape: Tape, loss: Var | None = None) -> Gradients:
    """Reverse-mode gradients of a scalar loss recorded on ``tape``.

    ``params`` must be the parameters that were bound to ``tape`` with
    :func:`watch`.  When ``loss`` is omitted the last recorded node is used.
    """
    if not tape.nodes:
        raise TapeStateError("backward() without a recorded forward pass")
    if loss is None:
        loss = tape.nodes[-1]
    leaves = {}
    # leaves are not on the node list; collect them through the graph
    stack, seen = [loss], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.name is not None and not node._parents:
            leaves[node.name] = node
        stack.extend(node._parents)
    for leaf in leaves.values():
        leaf.grad = None
    tape.backward(loss)
    grads = Gradients(params)
    for name, leaf in leaves.items():
        if name in grads.tensors and leaf.grad is not None:
            grads.tensors[name] = np.asarray(leaf.grad, dtype=params.dtype).reshape(params[name].shape)
    return grads


def value_and_grad(params: ModelParams, loss_fn):
    """Evaluate ``loss_fn(bound_params)`` and its gradient in one go."""
    tape = Tape()
    bp = watch(params, tape)
    loss = loss_fn(bp)
    if not isinstance(loss, Var):
        raise ContractError("loss_fn must return a Var built from the bound parameters")
    if not loss.requires_grad:
        return float(loss.data), Gradients(params)
    grads = backward(params, tape, loss)
    return float(loss.data), grads


@dataclass
class AdamWState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamWState":
        return cls(OrderedDict((k, np.zeros_like(t)) for k, t in params.tensors.items()),
                   OrderedDict((k, np.zeros_like(t)) for k, t in params.tensors.items()))


def adamw_step(params: ModelParams, grads: Gradients, state: AdamWState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0):
    """One AdamW update; returns ``(new_params, new_state)`` and leaves inputs untouched."""
    for name, g in grads.tensors.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"non-finite gradient in {name!r} ({bad} entries) at step {state.step + 1}")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_tensors, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    for name, p in params.tensors.items():
        g = grads.tensors[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        p = p - lr * weight_decay * p
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_tensors[name] = p.astype(params.dtype, copy=False)
        new_m[name], new_v[name] = m, v
    return ModelParams(params.config, new_tensors, params.precision), AdamWState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"ULNFORGE"


def save_checkpoint(params: ModelParams, path) -> None:
    """Write magic, u64-LE manifest length, JSON manifest, then raw LE tensors."""
    dtype = np.dtype(params.dtype).newbyteorder("<")
    entries, offset = [], 0
    for name, t in params.tensors.items():
        nbytes = t.size * dtype.itemsize
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    manifest = {
        "format": 1,
        "config": params.config.to_dict(),
        "precision": params.precision,
        "dtype": dtype.str,
        "tensors": entries,
        "payload_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t, dtype=dtype).tobytes())


def load_checkpoint(path, config: ModelConfig | None = None) -> ModelParams:
    """Read a checkpoint; ``config`` (optional) must agree with the stored shapes."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointHeaderError(f"{path}: missing ULNFORGE header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointHeaderError(f"{path}: manifest length {hlen} runs past end of file")
    try:
        manifest = json.loads(raw[16:16 + hlen].decode("utf-8"))
        stored_cfg = ModelConfig.from_dict(manifest["config"])
        dtype = np.dtype(manifest["dtype"])
        precision = manifest["precision"]
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointHeaderError(f"{path}: corrupt manifest ({exc})") from None
    want = (config or stored_cfg).param_shapes()
    got = OrderedDict((e["name"], tuple(e["shape"])) for e in entries)
    if list(want) != list(got) or any(want[k] != got[k] for k in want):
        diff = [k for k in set(want) | set(got) if want.get(k) != got.get(k)]
        raise CheckpointShapeError(f"{path}: tensor shapes disagree with config for {sorted(diff)[:5]}")
    payload = raw[16 + hlen:]
    need = sum(e["nbytes"] for e in entries)
    if len(payload) < need:
        raise CheckpointTruncatedError(f"{path}: payload has {len(payload)} bytes, manifest needs {need}")
    tensors = OrderedDict()
    for e in entries:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return ModelParams(config or stored_cfg, tensors, precision)
