"""The four-block runtime model and its serialization.

Block ``f`` embeds the normalized scale-out features, the autoencoder pair
``g``/``h`` compresses property vectors into 4-dimensional codes and
reconstructs them, and ``z`` maps the concatenation of the scale-out
embedding, the essential codes (in schema order), and the mean of the
optional codes onto a runtime in seconds. Training minimizes Huber runtime
error plus the autoencoder's reconstruction MSE.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import encoding
from .encoding import Normalizer, PropertyValue, encode_property
from .errors import ModelFileError, NumericsError, SchemaError
from .nn import TwoLayerBlock, huber_grad, huber_loss

SCALE_FEATURES = 3
F_HIDDEN = 16
F_DIM = 8  # scale-out embedding width
AE_HIDDEN = 8
CODE_DIM = 4  # property code width
Z_HIDDEN = 8

COMPONENTS = ("f", "g", "h", "z")

_MAGIC = b"JCMODEL\x00"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PropertySchema:
    """Ordered property names and kinds; order is part of the model."""

    essential: tuple[tuple[str, str], ...]  # (name, kind), kind in natural|text
    optional: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        names = [n for n, _ in self.essential + self.optional]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate property names in schema: {names}")
        if not self.essential:
            raise SchemaError("schema needs at least one essential property")
        for name, kind in self.essential + self.optional:
            if kind not in ("natural", "text"):
                raise SchemaError(f"property {name!r} has unknown kind {kind!r}")

    @property
    def essential_count(self) -> int:
        return len(self.essential)

    @property
    def combined_width(self) -> int:
        """Input width of ``z``: embedding + essential codes + pooled optional."""
        return F_DIM + (self.essential_count + 1) * CODE_DIM

    def check_properties(self, props: dict, where: str = "input") -> None:
        kinds = dict(self.essential + self.optional)
        for name, value in props.items():
            if name not in kinds:
                raise SchemaError(f"{where}: property {name!r} not in schema")
            if value.kind != kinds[name]:
                raise SchemaError(
                    f"{where}: property {name!r} is {value.kind}, schema says {kinds[name]}"
                )
        for name, _ in self.essential:
            if name not in props:
                raise SchemaError(f"{where}: essential property {name!r} missing")


class ModelState:
    """All weights plus the normalization bounds and the schema."""

    def __init__(self, f, g, h, z, normalizer, schema):
        self.f = f
        self.g = g
        self.h = h
        self.z = z
        self.normalizer = normalizer
        self.schema = schema
        self.trainable = {c: True for c in COMPONENTS}
        self._validate()

    def _validate(self):
        expect = {
            "f": (SCALE_FEATURES, F_DIM),
            "g": (encoding.VECTOR_SIZE, CODE_DIM),
            "h": (CODE_DIM, encoding.VECTOR_SIZE),
            "z": (self.schema.combined_width, 1),
        }
        for name, (d_in, d_out) in expect.items():
            block = getattr(self, name)
            if block.in_dim != d_in or block.out_dim != d_out:
                raise SchemaError(
                    f"block {name} is {block.in_dim}->{block.out_dim}, "
                    f"schema requires {d_in}->{d_out}"
                )

    @classmethod
    def new(cls, schema: PropertySchema, normalizer: Normalizer, rng,
            dropout_rate: float = 0.0) -> "ModelState":
        """Fresh He-initialized state.

        ``dropout_rate`` lands on the autoencoder blocks only; the
        scale-out block and the predictor never use dropout. ``g`` and
        ``h`` carry no biases, and the decoder's final activation is tanh
        to match the range of the property vectors.
        """
        f = TwoLayerBlock.new(SCALE_FEATURES, F_HIDDEN, F_DIM, rng, bias=True)
        g = TwoLayerBlock.new(encoding.VECTOR_SIZE, AE_HIDDEN, CODE_DIM, rng,
                              bias=False, dropout_rate=dropout_rate)
        h = TwoLayerBlock.new(CODE_DIM, AE_HIDDEN, encoding.VECTOR_SIZE, rng,
                              sigma="tanh", bias=False, dropout_rate=dropout_rate)
        z = TwoLayerBlock.new(schema.combined_width, Z_HIDDEN, 1, rng, bias=True)
        return cls(f, g, h, z, normalizer, schema)

    def copy(self) -> "ModelState":
        out = ModelState(self.f.copy(), self.g.copy(), self.h.copy(),
                         self.z.copy(), self.normalizer, self.schema)
        out.trainable = dict(self.trainable)
        return out

    def blocks(self) -> dict:
        return {c: getattr(self, c) for c in COMPONENTS}

    def parameters(self, only_trainable=False) -> dict:
        """Flat ``"block.param" -> array`` view of all weights."""
        out = {}
        for cname, block in self.blocks().items():
            if only_trainable and not self.trainable[cname]:
                continue
            for pname, arr in block.params().items():
                out[f"{cname}.{pname}"] = arr
        return out

    def set_trainable(self, component: str, trainable: bool) -> None:
        if component not in COMPONENTS:
            raise ValueError(f"unknown component {component!r}")
        self.trainable[component] = trainable

    def reset(self, component: str, rng) -> None:
        """Re-run He initialization for one component with a fresh rng."""
        old = getattr(self, component)
        fresh = TwoLayerBlock.new(
            old.in_dim, old.w1.shape[0], old.out_dim, rng,
            phi=old.phi, sigma=old.sigma, bias=old.bias_enabled,
            dropout_rate=old.dropout_rate,
        )
        setattr(self, component, fresh)

    def fingerprint(self) -> str:
        """Hex content hash; changes iff weights, bounds, or schema change."""
        return hashlib.sha256(serialize(self)).hexdigest()


@dataclass
class Prediction:
    """Model output for one input configuration."""

    runtime_seconds: float
    codes: list = field(default_factory=list)
    reconstructions: list = field(default_factory=list)
    negative_output: bool = False


@dataclass
class EncodedBatch:
    """Records encoded once, with property vectors deduplicated.

    ``pvecs`` holds the unique property vectors; the index arrays say which
    rows each record uses. ``usage`` counts, per record and unique vector,
    how many of the record's properties map onto that vector, which weights
    the reconstruction loss by actual occurrences.
    """

    sfeat: np.ndarray  # (B, 3) normalized scale-out features
    pvecs: np.ndarray  # (U, 40)
    ess_rows: np.ndarray  # (B, m) int
    opt_weights: np.ndarray  # (B, U) mean-pooling weights for optional codes
    usage: np.ndarray  # (B, U) occurrence counts
    runtimes: np.ndarray | None  # (B,)

    @property
    def size(self) -> int:
        return self.sfeat.shape[0]


def encode_batch(schema: PropertySchema, normalizer: Normalizer, records,
                 with_runtimes=True) -> EncodedBatch:
    records = list(records)
    b = len(records)
    m = schema.essential_count
    sfeat = np.empty((b, SCALE_FEATURES))
    rows: dict[PropertyValue, int] = {}
    vecs: list[np.ndarray] = []
    ess_rows = np.empty((b, m), dtype=np.intp)
    opt_hits: list[list[int]] = []

    def row_of(value: PropertyValue) -> int:
        if value not in rows:
            rows[value] = len(vecs)
            vecs.append(encode_property(value))
        return rows[value]

    for i, r in enumerate(records):
        schema.check_properties(r.properties, where=f"record {i}")
        sfeat[i] = normalizer.transform(r.scale_out)
        for j, (name, _) in enumerate(schema.essential):
            ess_rows[i, j] = row_of(r.properties[name])
        opt_hits.append([
            row_of(r.properties[name])
            for name, _ in schema.optional
            if name in r.properties
        ])

    pvecs = np.stack(vecs) if vecs else np.zeros((0, encoding.VECTOR_SIZE))
    u = pvecs.shape[0]
    opt_weights = np.zeros((b, u))
    usage = np.zeros((b, u))
    for i in range(b):
        for j in range(m):
            usage[i, ess_rows[i, j]] += 1
        hits = opt_hits[i]
        for row in hits:
            opt_weights[i, row] += 1.0 / len(hits)
            usage[i, row] += 1
    runtimes = None
    if with_runtimes:
        runtimes = np.array([r.runtime_seconds for r in records], dtype=np.float64)
    return EncodedBatch(sfeat, pvecs, ess_rows, opt_weights, usage, runtimes)


def _assemble(schema, e, codes, ess_rows, opt_weights):
    b = e.shape[0]
    m = schema.essential_count
    r = np.empty((b, schema.combined_width))
    r[:, :F_DIM] = e
    for j in range(m):
        r[:, F_DIM + j * CODE_DIM : F_DIM + (j + 1) * CODE_DIM] = codes[ess_rows[:, j]]
    r[:, F_DIM + m * CODE_DIM :] = opt_weights @ codes
    return r


def forward_batch(state: ModelState, batch: EncodedBatch, train=False, rng=None,
                  need_recon=True, cached_codes=None, cached_e=None):
    """Full forward pass over an encoded batch.

    Returns ``(outputs, detail)`` where ``detail`` carries intermediate
    values and caches for :func:`backward_batch`. ``cached_codes`` /
    ``cached_e`` skip the autoencoder / scale-out block when their weights
    are known not to have changed (frozen fine-tuning).
    """
    if cached_e is None:
        e, f_cache = state.f.forward(batch.sfeat, train=train, rng=rng)
    else:
        e, f_cache = cached_e, None
    if cached_codes is None:
        codes, g_cache = state.g.forward(batch.pvecs, train=train, rng=rng)
    else:
        codes, g_cache = cached_codes, None
    recons, h_cache = (None, None)
    if need_recon and cached_codes is None:
        recons, h_cache = state.h.forward(codes, train=train, rng=rng)
    r = _assemble(state.schema, e, codes, batch.ess_rows, batch.opt_weights)
    y2, z_cache = state.z.forward(r, train=train, rng=rng)
    y = y2[:, 0]
    detail = {
        "e": e, "codes": codes, "recons": recons, "r": r,
        "f_cache": f_cache, "g_cache": g_cache, "h_cache": h_cache,
        "z_cache": z_cache,
    }
    return y, detail


def backward_batch(state: ModelState, batch: EncodedBatch, detail, dy,
                   drecons=None) -> dict:
    """Gradients of the loss w.r.t. every parameter that was forwarded live.

    ``dy`` is dLoss/d(outputs), shape (B,). ``drecons`` is
    dLoss/d(reconstructions) over the unique vectors, or None when the
    reconstruction term is absent. Blocks that ran from a cache (frozen
    during fine-tuning) are skipped and contribute no gradient keys.
    """
    schema = state.schema
    m = schema.essential_count
    dr, z_grads = state.z.backward(detail["z_cache"], dy[:, None])
    grads = {f"z.{k}": v for k, v in z_grads.items()}
    if detail["g_cache"] is not None:
        dcodes = np.zeros_like(detail["codes"])
        for j in range(m):
            np.add.at(dcodes, batch.ess_rows[:, j],
                      dr[:, F_DIM + j * CODE_DIM : F_DIM + (j + 1) * CODE_DIM])
        dcodes += batch.opt_weights.T @ dr[:, F_DIM + m * CODE_DIM :]
        if drecons is not None:
            dcodes_h, h_grads = state.h.backward(detail["h_cache"], drecons)
            dcodes += dcodes_h
            grads.update({f"h.{k}": v for k, v in h_grads.items()})
        _, g_grads = state.g.backward(detail["g_cache"], dcodes)
        grads.update({f"g.{k}": v for k, v in g_grads.items()})
    if detail["f_cache"] is not None:
        _, f_grads = state.f.backward(detail["f_cache"], dr[:, :F_DIM])
        grads.update({f"f.{k}": v for k, v in f_grads.items()})
    return grads


def joint_loss(state: ModelState, records, huber_delta: float = 1.0,
               recon_weight: float = 1.0, train=False, rng=None):
    """Total, runtime, and reconstruction loss terms over a batch of records.

    The runtime term is mean-reduced Huber error in seconds; the
    reconstruction term is the MSE over every (record, property)
    reconstruction, weighted by occurrence.
    """
    records = list(records)
    if not records:
        raise ValueError("joint_loss needs a nonempty batch")
    batch = encode_batch(state.schema, state.normalizer, records)
    y, detail = forward_batch(state, batch, train=train, rng=rng)
    runtime_term = huber_loss(y, batch.runtimes, huber_delta)
    recon_term = _recon_loss(batch, detail)[0]
    total = runtime_term + recon_weight * recon_term
    if not np.isfinite(total):
        raise NumericsError("joint loss is non-finite")
    return total, runtime_term, recon_term


def _recon_loss(batch: EncodedBatch, detail):
    """Occurrence-weighted reconstruction MSE and its gradient."""
    occ = batch.usage.sum(axis=0)
    pairs = occ.sum()
    err = detail["recons"] - batch.pvecs
    denom = pairs * encoding.VECTOR_SIZE
    loss = float(np.sum(occ * np.sum(err * err, axis=1)) / denom)
    dgrad = (2.0 / denom) * occ[:, None] * err
    return loss, dgrad


def joint_loss_grads(state: ModelState, records, huber_delta: float = 1.0,
                     recon_weight: float = 1.0, train=False, rng=None):
    """Loss terms plus gradients; the training-loop building block."""
    batch = encode_batch(state.schema, state.normalizer, list(records))
    y, detail = forward_batch(state, batch, train=train, rng=rng)
    runtime_term = huber_loss(y, batch.runtimes, huber_delta)
    recon_term, drecons = _recon_loss(batch, detail)
    dy = huber_grad(y, batch.runtimes, huber_delta)
    grads = backward_batch(state, batch, detail, dy, recon_weight * drecons)
    total = runtime_term + recon_weight * recon_term
    return total, runtime_term, recon_term, grads


def forward(state: ModelState, scale_out: int, props: dict, train=False,
            rng=None) -> Prediction:
    """Predict the runtime for one configuration.

    ``props`` maps property names to :class:`PropertyValue`; every
    essential property must be present, optional ones may be missing.
    """
    state.schema.check_properties(props)
    sfeat = state.normalizer.transform(scale_out)
    e, _ = state.f.forward(sfeat, train=train, rng=rng)
    codes = []
    recons = []
    by_name = {}
    for name, _kind in state.schema.essential + state.schema.optional:
        if name not in props:
            continue
        pvec = encode_property(props[name])
        code, _ = state.g.forward(pvec, train=train, rng=rng)
        rec, _ = state.h.forward(code, train=train, rng=rng)
        codes.append(code)
        recons.append(rec)
        by_name[name] = code
    ess = [by_name[name] for name, _ in state.schema.essential]
    opt = [by_name[name] for name, _ in state.schema.optional if name in by_name]
    pooled = np.mean(opt, axis=0) if opt else np.zeros(CODE_DIM)
    r = np.concatenate([e] + ess + [pooled])
    y, _ = state.z.forward(r, train=train, rng=rng)
    runtime = float(y[0])
    return Prediction(runtime, codes, recons, negative_output=runtime < 0)


def predict(state: ModelState, scale_out: int, props: dict) -> Prediction:
    """Inference-mode forward pass; deterministic and side-effect free."""
    return forward(state, scale_out, props, train=False)


# ---------------------------------------------------------------------------
# Serialization: versioned binary format.
#
#   magic (8 bytes) | version (uint32 LE) | header length (uint32 LE)
#   | header (UTF-8 JSON) | weight arrays (raw float64 LE, declared order)
#   | sha256 of everything above (32 bytes)
#
# The trailing digest doubles as the model fingerprint.
# ---------------------------------------------------------------------------

_WEIGHT_ORDER = ("f.w1", "f.b1", "f.w2", "f.b2", "g.w1", "g.w2",
                 "h.w1", "h.w2", "z.w1", "z.b1", "z.w2", "z.b2")


def _header(state: ModelState) -> dict:
    return {
        "schema": {
            "essential": [list(p) for p in state.schema.essential],
            "optional": [list(p) for p in state.schema.optional],
        },
        "dims": {
            "scale_features": SCALE_FEATURES,
            "f_hidden": F_HIDDEN,
            "f_dim": F_DIM,
            "ae_hidden": AE_HIDDEN,
            "code_dim": CODE_DIM,
            "vector_size": encoding.VECTOR_SIZE,
            "z_hidden": Z_HIDDEN,
            "combined_width": state.schema.combined_width,
        },
        "activations": {c: [b.phi, b.sigma] for c, b in state.blocks().items()},
        "dropout": {c: b.dropout_rate for c, b in state.blocks().items()},
        "normalizer": {"lo": list(state.normalizer.lo), "hi": list(state.normalizer.hi)},
    }


def serialize(state: ModelState) -> bytes:
    header = json.dumps(_header(state), sort_keys=True).encode("utf-8")
    parts = [_MAGIC, struct.pack("<I", _FORMAT_VERSION),
             struct.pack("<I", len(header)), header]
    params = state.parameters()
    for name in _WEIGHT_ORDER:
        if name in params:
            parts.append(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return b"".join(parts)


def save(state: ModelState, path) -> None:
    """Write the model file; the fingerprint digest is appended last."""
    payload = serialize(state)
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


def load(path) -> ModelState:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    if len(blob) < len(_MAGIC) + 8 + 32 or blob[: len(_MAGIC)] != _MAGIC:
        raise ModelFileError(f"{path}: not a model file (bad magic)")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ModelFileError(f"{path}: corrupt model file (checksum mismatch)")
    pos = len(_MAGIC)
    version, header_len = struct.unpack_from("<II", payload, pos)
    if version != _FORMAT_VERSION:
        raise ModelFileError(
            f"{path}: format version {version} unsupported (expected {_FORMAT_VERSION})"
        )
    pos += 8
    header = json.loads(payload[pos : pos + header_len].decode("utf-8"))
    pos += header_len

    try:
        schema = PropertySchema(
            tuple(tuple(p) for p in header["schema"]["essential"]),
            tuple(tuple(p) for p in header["schema"]["optional"]),
        )
        dims = header["dims"]
        acts = header["activations"]
        dropout = header["dropout"]
        normalizer = Normalizer(tuple(header["normalizer"]["lo"]),
                                tuple(header["normalizer"]["hi"]))
    except (KeyError, TypeError) as exc:
        raise ModelFileError(f"{path}: malformed header: {exc}") from exc
    if dims["vector_size"] != encoding.VECTOR_SIZE:
        raise SchemaError(f"{path}: vector size {dims['vector_size']} unsupported")
    if dims["combined_width"] != schema.combined_width:
        raise SchemaError(
            f"{path}: stored width {dims['combined_width']} conflicts with "
            f"{schema.essential_count} essential properties"
        )

    def read(shape):
        nonlocal pos
        n = int(np.prod(shape)) * 8
        if pos + n > len(payload):
            raise ModelFileError(f"{path}: truncated weight data")
        arr = np.frombuffer(payload[pos : pos + n], dtype="<f8").reshape(shape)
        pos += n
        return arr.astype(np.float64)

    def block(name, d_in, hidden, d_out, bias):
        w1 = read((hidden, d_in))
        b1 = read((hidden,)) if bias else None
        w2 = read((d_out, hidden))
        b2 = read((d_out,)) if bias else None
        phi, sigma = acts[name]
        return TwoLayerBlock(w1, b1, w2, b2, phi=phi, sigma=sigma,
                             dropout_rate=dropout[name])

    f = block("f", dims["scale_features"], dims["f_hidden"], dims["f_dim"], True)
    g = block("g", dims["vector_size"], dims["ae_hidden"], dims["code_dim"], False)
    h = block("h", dims["code_dim"], dims["ae_hidden"], dims["vector_size"], False)
    z = block("z", dims["combined_width"], dims["z_hidden"], 1, True)
    if pos != len(payload):
        raise ModelFileError(f"{path}: trailing bytes after weight data")
    return ModelState(f, g, h, z, normalizer, schema)
