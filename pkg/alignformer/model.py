"""Miniature encoder-decoder set-prediction network.

Grid tokens pass through a linear input projection and post-norm encoder
layers (``self_attn, norm, ffn, norm``); ``P`` learned queries then run
through decoder layers (``self_attn, norm, cross_attn, norm, ffn, norm``)
and four two-layer heads produce the human box, object box, verb and noun
predictions.

Parameter names are stable: ``input_proj.w``, ``enc.0.attn.wq``,
``enc.0.ln1.g``, ``dec.1.cross_attn.wo``, ``query.embed``,
``head.verb.l1.w`` and so on.
"""

import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import ndtensor as nd
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, VocabConfig, section_from_dict
from .errors import CheckpointError, ShapeError
from .ndtensor import Tensor

logger = logging.getLogger(__name__)

_MODEL_TAG = 0x4D444C
HEAD_NAMES = ('human', 'object', 'verb', 'noun')


class ParameterStore:
    """Ordered, uniquely named trainable tensors."""

    def __init__(self):
        self._tensors = {}
        self._frozen = set()

    def register(self, name, values):
        if name in self._tensors:
            raise ValueError(f'parameter {name!r} registered twice')
        tensor = Tensor(np.ascontiguousarray(values), requires_grad=True)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable_items(self):
        """Parameters the optimizer updates, in registration order."""
        return [(n, t) for n, t in self._tensors.items() if n not in self._frozen]

    def freeze(self, prefix):
        """Exclude every parameter whose name starts with ``prefix``."""
        for name in self._tensors:
            if name.startswith(prefix):
                self._frozen.add(name)

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def astype(self, dtype):
        """Copy of the store with every tensor cast to ``dtype``."""
        other = ParameterStore()
        for name, tensor in self._tensors.items():
            other.register(name, tensor.data.astype(dtype))
        other._frozen = set(self._frozen)
        return other

    def state_dict(self):
        return {name: t.data for name, t in self._tensors.items()}

    def load_state_dict(self, arrays):
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise CheckpointError(
                f'parameter names differ: missing {sorted(missing)}, '
                f'unexpected {sorted(extra)}'
            )
        for name, tensor in self._tensors.items():
            values = np.asarray(arrays[name])
            if values.shape != tensor.shape:
                raise CheckpointError(
                    f'parameter {name!r}: expected shape {tensor.shape}, '
                    f'got {values.shape}'
                )
            tensor.data = values.astype(tensor.dtype).copy()


@dataclass
class PredictionSet:
    """Per-query human box, object box, verb and noun predictions."""

    human: Tensor
    object: Tensor
    verb: Tensor
    noun: Tensor

    @property
    def size(self):
        return self.human.shape[0]

    def arrays(self):
        return {
            'human': self.human.data,
            'object': self.object.data,
            'verb': self.verb.data,
            'noun': self.noun.data,
        }


def init_params(cfg, vocab, d_in, seed):
    """Build a deterministic parameter store for ``cfg``.

    Projections use fan-in scaled uniform initialization, biases and
    layer-norm shifts start at zero, scales at one, and query embeddings are
    drawn from ``N(0, 1/sqrt(D))``.
    """
    cfg.validate()
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, _MODEL_TAG]))
    )
    store = ParameterStore()
    d = cfg.d_model

    def uniform(name, fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        store.register(name, rng.uniform(-bound, bound, shape).astype(np.float32))

    def linear(prefix, fan_in, fan_out):
        uniform(f'{prefix}.w', fan_in, (fan_in, fan_out))
        store.register(f'{prefix}.b', np.zeros(fan_out, dtype=np.float32))

    def norm(prefix):
        store.register(f'{prefix}.g', np.ones(d, dtype=np.float32))
        store.register(f'{prefix}.b', np.zeros(d, dtype=np.float32))

    def attention(prefix):
        for proj in ('wq', 'wk', 'wv', 'wo'):
            uniform(f'{prefix}.{proj}', d, (d, d))
        store.register(f'{prefix}.bo', np.zeros(d, dtype=np.float32))

    def mlp(prefix):
        linear(f'{prefix}.l1', d, cfg.hidden)
        linear(f'{prefix}.l2', cfg.hidden, d)

    linear('input_proj', d_in, d)
    for i in range(cfg.enc_layers):
        attention(f'enc.{i}.attn')
        norm(f'enc.{i}.ln1')
        mlp(f'enc.{i}.mlp')
        norm(f'enc.{i}.ln2')
    for i in range(cfg.dec_layers):
        attention(f'dec.{i}.self_attn')
        norm(f'dec.{i}.ln1')
        attention(f'dec.{i}.cross_attn')
        norm(f'dec.{i}.ln2')
        mlp(f'dec.{i}.mlp')
        norm(f'dec.{i}.ln3')
    store.register(
        'query.embed',
        rng.normal(0.0, 1.0 / math.sqrt(d), (cfg.num_queries, d)).astype(np.float32),
    )
    outputs = {
        'human': 4,
        'object': 4,
        'verb': vocab.num_verbs,
        'noun': vocab.num_nouns,
    }
    for head in HEAD_NAMES:
        linear(f'head.{head}.l1', d, d)
        linear(f'head.{head}.l2', d, outputs[head])
    return store


@lru_cache(maxsize=32)
def position_encoding(h, w, d):
    """Fixed 2-D sinusoidal encodings, rows in the first half of the width."""
    half = d // 2
    dim_t = 10000.0 ** (2 * (np.arange(half) // 2) / half)
    rows = (np.arange(h) + 0.5) / h * 2 * math.pi
    cols = (np.arange(w) + 0.5) / w * 2 * math.pi

    def embed(values):
        angles = values[:, None] / dim_t[None, :]
        out = np.empty_like(angles)
        out[:, 0::2] = np.sin(angles[:, 0::2])
        out[:, 1::2] = np.cos(angles[:, 1::2])
        return out

    pos_y = np.repeat(embed(rows), w, axis=0)
    pos_x = np.tile(embed(cols), (h, 1))
    out = np.concatenate([pos_y, pos_x], axis=1)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def _head_selector(d, heads, head, dtype):
    width = d // heads
    sel = np.zeros((d, width), dtype=dtype)
    sel[np.arange(head * width, (head + 1) * width), np.arange(width)] = 1
    sel.setflags(write=False)
    return sel


def linear(x, params, prefix):
    return nd.broadcast_add_row(x @ params[f'{prefix}.w'], params[f'{prefix}.b'])


def layer_norm(x, params, prefix):
    scaled = nd.broadcast_mul_row(nd.layernorm_lastdim(x), params[f'{prefix}.g'])
    return nd.broadcast_add_row(scaled, params[f'{prefix}.b'])


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return nd.mul_elementwise(x, Tensor(keep))


def multi_head_attention(query, key, value, params, prefix, heads):
    """Scaled dot-product attention with ``heads`` heads.

    Returns:
        tuple: ``(output, weights)`` where ``weights`` has shape
        ``heads x len(query) x len(key)``.
    """
    d = query.shape[1]
    if key.shape[1] != d or value.shape[1] != d or key.shape[0] != value.shape[0]:
        raise ShapeError(
            f'{prefix}: incompatible shapes {query.shape}, {key.shape}, {value.shape}'
        )
    q = query @ params[f'{prefix}.wq']
    k = key @ params[f'{prefix}.wk']
    v = value @ params[f'{prefix}.wv']
    scale = 1.0 / math.sqrt(d // heads)
    merged = None
    weights = []
    for h in range(heads):
        sel = Tensor(_head_selector(d, heads, h, q.dtype.str))
        scores = nd.scalar_mul((q @ sel) @ (k @ sel).T, scale)
        attn = nd.softmax_lastdim(scores)
        weights.append(attn.data)
        out = attn @ (v @ sel)
        merged = out if merged is None else nd.concat_lastdim(merged, out)
    projected = merged @ params[f'{prefix}.wo']
    result = nd.broadcast_add_row(projected, params[f'{prefix}.bo'])
    return result, np.stack(weights)


def _ffn(x, params, prefix, rate, rng):
    hidden = nd.relu(linear(x, params, f'{prefix}.l1'))
    return dropout(linear(hidden, params, f'{prefix}.l2'), rate, rng)


def grid_tokens(grid, params):
    """Flatten an ``H x W x D_in`` grid into ``HW x D_in`` constant tokens."""
    arr = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    if arr.ndim != 3:
        raise ShapeError(f'encode: grid must be H x W x D_in, got shape {arr.shape}')
    d_in = params['input_proj.w'].shape[0]
    if arr.shape[2] != d_in:
        raise ShapeError(f'encode: grid has D_in={arr.shape[2]}, model expects {d_in}')
    h, w, _ = arr.shape
    return Tensor(arr.reshape(h * w, d_in).astype(params.dtype)), (h, w)


def encode(grid, params, cfg, rng=None, attention=None):
    """Encode a feature grid into ``HW x D`` tokens.

    Position encodings are added to queries and keys of every self-attention.
    When ``attention`` is a list, each layer's weights are appended to it.
    """
    tokens, (h, w) = grid_tokens(grid, params)
    pos = Tensor(position_encoding(h, w, cfg.d_model).astype(params.dtype))
    x = linear(tokens, params, 'input_proj')
    for i in range(cfg.enc_layers):
        prefix = f'enc.{i}'
        qk = x + pos
        a, weights = multi_head_attention(
            qk, qk, x, params, f'{prefix}.attn', cfg.heads
        )
        if attention is not None:
            attention.append(weights)
        x = layer_norm(x + dropout(a, cfg.dropout, rng), params, f'{prefix}.ln1')
        ffn = _ffn(x, params, f'{prefix}.mlp', cfg.dropout, rng)
        x = layer_norm(x + ffn, params, f'{prefix}.ln2')
    return x


def decode(tokens, queries, params, cfg, pos=None, rng=None):
    """Decode ``P`` queries against encoder tokens.

    Args:
        tokens: ``HW x D`` encoder output.
        queries: ``P x D`` query embeddings.
        params: Parameter store.
        cfg: Model config.
        pos: Optional ``HW x D`` position encodings added to cross-attention keys.
        rng: Dropout generator; ``None`` disables dropout.

    Returns:
        tuple: ``(x, attention)`` with ``x`` of shape ``P x D`` and the
        cross-attention maps as an array ``layers x heads x P x HW``.
    """
    if tokens.shape[1] != cfg.d_model or queries.shape[1] != cfg.d_model:
        raise ShapeError(
            f'decode: incompatible shapes {tokens.shape} and {queries.shape}'
        )
    memory_keys = tokens if pos is None else tokens + pos
    tgt = Tensor(np.zeros(queries.shape, dtype=queries.dtype))
    maps = []
    for i in range(cfg.dec_layers):
        prefix = f'dec.{i}'
        qk = tgt + queries
        a, _ = multi_head_attention(
            qk, qk, tgt, params, f'{prefix}.self_attn', cfg.heads
        )
        tgt = layer_norm(tgt + dropout(a, cfg.dropout, rng), params, f'{prefix}.ln1')
        a, weights = multi_head_attention(
            tgt + queries,
            memory_keys,
            tokens,
            params,
            f'{prefix}.cross_attn',
            cfg.heads,
        )
        maps.append(weights)
        tgt = layer_norm(tgt + dropout(a, cfg.dropout, rng), params, f'{prefix}.ln2')
        ffn = _ffn(tgt, params, f'{prefix}.mlp', cfg.dropout, rng)
        tgt = layer_norm(tgt + ffn, params, f'{prefix}.ln3')
    return tgt, np.stack(maps)


def _head(x, params, name):
    hidden = nd.relu(linear(x, params, f'head.{name}.l1'))
    return linear(hidden, params, f'head.{name}.l2')


def classify(x, params):
    """Apply the four prediction heads to per-query features."""
    return PredictionSet(
        human=nd.sigmoid(_head(x, params, 'human')),
        object=nd.sigmoid(_head(x, params, 'object')),
        verb=nd.sigmoid(_head(x, params, 'verb')),
        noun=nd.softmax_lastdim(_head(x, params, 'noun')),
    )


def forward(grid, params, cfg, rng=None):
    """Run encode, decode and classify on one grid.

    Returns:
        tuple: ``(PredictionSet, cross_attention)``.
    """
    tokens = encode(grid, params, cfg, rng=rng)
    h, w = grid.shape[:2]
    pos = Tensor(position_encoding(h, w, cfg.d_model).astype(params.dtype))
    x, attention = decode(tokens, params['query.embed'], params, cfg, pos=pos, rng=rng)
    return classify(x, params), attention


def save_model(path, params, cfg, vocab, d_in, metadata=None):
    """Write parameters plus the metadata needed to rebuild the model."""
    meta = {
        'model': asdict(cfg),
        'num_verbs': vocab.num_verbs,
        'num_nouns': vocab.num_nouns,
        'd_in': d_in,
    }
    meta.update(metadata or {})
    return save_checkpoint(path, params.state_dict(), meta)


def load_model(path):
    """Rebuild a parameter store from a checkpoint.

    Returns:
        tuple: ``(params, model_config, metadata)``.
    """
    arrays, meta = load_checkpoint(path)
    try:
        cfg = section_from_dict(ModelConfig, meta['model'])
        vocab = VocabConfig(
            num_verbs=int(meta['num_verbs']), num_nouns=int(meta['num_nouns'])
        )
        d_in = int(meta['d_in'])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f'{path}: incomplete checkpoint metadata ({e})') from e
    params = init_params(cfg, vocab, d_in, seed=0)
    params.load_state_dict(arrays)
    return params, cfg, meta
