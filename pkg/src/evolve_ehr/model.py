"""Evolve transformer and its bidirectional CLS reference variant.

Both share one pre-layer-norm backbone. In ``evolve`` mode a causal mask is
applied and a shared decision layer produces a multi-label prediction at every
position; in ``cls`` mode attention is bidirectional and only the output at the
leading CLS token is decoded.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

PAD_ID = 0
CLS_ID = 1
CODE_OFFSET = 2  # dataset code k is token k + CODE_OFFSET

MODES = ("evolve", "cls")

CHECKPOINT_MAGIC = b"EVLV"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    n_classes: int
    d_model: int = 384
    n_heads: int = 8
    n_layers: int = 8
    max_seq_len: int = 400
    n_ages: int = 111
    n_t2f: int = 62
    dropout: float = 0.1
    mode: str = "evolve"
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "n_classes", "d_model", "n_heads", "n_layers", "n_ages", "n_t2f"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("ModelConfig.d_model must be divisible by n_heads")
        if self.max_seq_len < 2:
            raise ValueError("ModelConfig.max_seq_len must be at least 2")
        if self.mode not in MODES:
            raise ValueError(f"ModelConfig.mode must be one of {MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("ModelConfig.dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def n_parameters(self) -> int:
        """Closed-form parameter count.

        embeddings (V + n_ages + max_seq_len + n_t2f) * d
        + per block 12 d^2 + 13 d  (two layer norms, qkv, attn proj, 4x MLP)
        + final layer norm 2 d + decision layer d C + C
        """
        d, C = self.d_model, self.n_classes
        emb = (self.vocab_size + self.n_ages + self.max_seq_len + self.n_t2f) * d
        block = 12 * d * d + 13 * d
        return emb + self.n_layers * block + 2 * d + d * C + C


@dataclass
class InputSequence:
    """Token ids with per-position age, position and years-to-forecast streams."""

    codes: np.ndarray
    ages: np.ndarray
    t2f: np.ndarray
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.ages = np.asarray(self.ages, dtype=np.int64)
        self.t2f = np.asarray(self.t2f, dtype=np.int64)
        if self.positions is None:
            self.positions = np.arange(len(self.codes), dtype=np.int64)
        else:
            self.positions = np.asarray(self.positions, dtype=np.int64)
        n = len(self.codes)
        if not (len(self.ages) == len(self.t2f) == len(self.positions) == n):
            raise ValueError("InputSequence streams must share one length")

    def __len__(self) -> int:
        return len(self.codes)

    def prefix(self, t: int) -> "InputSequence":
        return InputSequence(self.codes[:t], self.ages[:t], self.t2f[:t], self.positions[:t])


class ClipCounter:
    """Counts age/t2f values clipped into embedding-table range."""

    def __init__(self):
        self.ages = 0
        self.t2f = 0

    def __repr__(self) -> str:
        return f"ClipCounter(ages={self.ages}, t2f={self.t2f})"


def prepare_sequence(seq: InputSequence, config: ModelConfig, clips: ClipCounter | None = None) -> InputSequence:
    """Fit a raw sequence to a model: keep the most recent codes, clip ages
    and t2f into table range, and prepend the CLS token in ``cls`` mode."""
    budget = config.max_seq_len - (1 if config.mode == "cls" else 0)
    if len(seq) == 0:
        raise ValueError("empty input sequence")
    codes, ages, t2f = seq.codes[-budget:], seq.ages[-budget:], seq.t2f[-budget:]
    a = np.clip(ages, 0, config.n_ages - 1)
    f = np.clip(t2f, 0, config.n_t2f - 1)
    if clips is not None:
        clips.ages += int((a != ages).sum())
        clips.t2f += int((f != t2f).sum())
    if config.mode == "cls":
        codes = np.concatenate([[CLS_ID], codes])
        a = np.concatenate([a[:1], a])
        f = np.concatenate([f[:1], f])
    return InputSequence(codes, a, f)


def attention_mask(T: int, mode: str) -> np.ndarray:
    """Boolean T x T mask, True where query i may attend to key j."""
    if mode == "evolve":
        return np.tril(np.ones((T, T), dtype=bool))
    if mode == "cls":
        return np.ones((T, T), dtype=bool)
    raise ValueError(f"unknown mode {mode!r}")


def pad_sequences(seqs: Sequence[InputSequence]) -> dict[str, np.ndarray]:
    """Right-pad a list of prepared sequences into B x T_max id matrices."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max())
    B = len(seqs)
    out = {k: np.zeros((B, T), dtype=np.int64) for k in ("codes", "ages", "positions", "t2f")}
    for i, s in enumerate(seqs):
        n = len(s)
        out["codes"][i, :n] = s.codes
        out["ages"][i, :n] = s.ages
        out["positions"][i, :n] = s.positions
        out["t2f"][i, :n] = s.t2f
    out["lengths"] = lengths
    return out


class EvolveModel:
    """Transformer with per-position (evolve) or CLS-token (cls) decision layer."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, init_std: float = 0.02):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        rng = np.random.default_rng(seed)
        d, C = config.d_model, config.n_classes

        def normal(*shape, std=init_std):
            return rng.normal(0.0, std, size=shape)

        self._add("emb.code", normal(config.vocab_size, d))
        self._add("emb.age", normal(config.n_ages, d))
        self._add("emb.pos", normal(config.max_seq_len, d))
        self._add("emb.t2f", normal(config.n_t2f, d))
        # residual projections scaled down with depth (GPT-2 style)
        proj_std = init_std / math.sqrt(2 * config.n_layers)
        for i in range(config.n_layers):
            p = f"blocks.{i}."
            self._add(p + "ln1.gain", np.ones(d))
            self._add(p + "ln1.bias", np.zeros(d))
            self._add(p + "attn.qkv.weight", normal(d, 3 * d))
            self._add(p + "attn.qkv.bias", np.zeros(3 * d))
            self._add(p + "attn.proj.weight", normal(d, d, std=proj_std))
            self._add(p + "attn.proj.bias", np.zeros(d))
            self._add(p + "ln2.gain", np.ones(d))
            self._add(p + "ln2.bias", np.zeros(d))
            self._add(p + "mlp.fc.weight", normal(d, 4 * d))
            self._add(p + "mlp.fc.bias", np.zeros(4 * d))
            self._add(p + "mlp.proj.weight", normal(4 * d, d, std=proj_std))
            self._add(p + "mlp.proj.bias", np.zeros(d))
        self._add("ln_f.gain", np.ones(d))
        self._add("ln_f.bias", np.zeros(d))
        self._add("head.weight", normal(d, C))
        self._add("head.bias", np.zeros(C))
        self.clips = ClipCounter()

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True, name=name)

    # ------------------------------------------------------------------
    # parameter management

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(self.dtype).copy()

    def astype(self, dtype) -> "EvolveModel":
        """Return a copy of this model running in another float precision."""
        other = EvolveModel.__new__(EvolveModel)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.params = OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=True, name=k)) for k, v in self.params.items()
        )
        other.clips = ClipCounter()
        return other

    # ------------------------------------------------------------------
    # forward pieces

    def validate_sequence(self, seq: InputSequence) -> None:
        cfg = self.config
        T = len(seq)
        if T == 0:
            raise ValueError("empty input sequence")
        if T > cfg.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
        if np.any(np.diff(seq.ages) < 0):
            raise ValueError("ages must be non-decreasing")
        if np.any(np.diff(seq.t2f) > 0):
            raise ValueError("t2f must be non-increasing")
        if cfg.mode == "cls" and seq.codes[0] != CLS_ID:
            raise ValueError("cls mode expects the CLS token at position 0")

    def embed_inputs(self, codes, ages, positions, t2f) -> Tensor:
        """Sum of code, age, position and t2f embeddings per position."""
        codes = np.asarray(codes)
        if codes.shape[-1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {codes.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}")
        p = self.params
        x = ad.embedding_lookup(p["emb.code"], codes)
        x = x + ad.embedding_lookup(p["emb.age"], ages)
        x = x + ad.embedding_lookup(p["emb.pos"], positions)
        return x + ad.embedding_lookup(p["emb.t2f"], t2f)

    def _attention(self, x: Tensor, i: int, mask: np.ndarray, train: bool, rng) -> Tensor:
        cfg = self.config
        p = self.params
        B, T, d = x.shape
        h = cfg.n_heads
        dh = d // h
        qkv = ad.matmul(x, p[f"blocks.{i}.attn.qkv.weight"]) + p[f"blocks.{i}.attn.qkv.bias"]
        qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = ad.masked_softmax_rows(scores, mask)
        att = ad.dropout(att, cfg.dropout, rng, train)
        y = ad.matmul(att, v)
        y = ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (B, T, d))
        y = ad.matmul(y, p[f"blocks.{i}.attn.proj.weight"]) + p[f"blocks.{i}.attn.proj.bias"]
        return ad.dropout(y, cfg.dropout, rng, train)

    def _mlp(self, x: Tensor, i: int, train: bool, rng) -> Tensor:
        p = self.params
        y = ad.matmul(x, p[f"blocks.{i}.mlp.fc.weight"]) + p[f"blocks.{i}.mlp.fc.bias"]
        y = ad.gelu(y)
        y = ad.matmul(y, p[f"blocks.{i}.mlp.proj.weight"]) + p[f"blocks.{i}.mlp.proj.bias"]
        return ad.dropout(y, self.config.dropout, rng, train)

    def _mask(self, lengths: np.ndarray, T: int) -> np.ndarray:
        if self.config.mode == "evolve":
            # right padding sits after every real position, so the causal mask alone suffices
            return attention_mask(T, "evolve")
        key_ok = np.arange(T)[None, :] < lengths[:, None]
        return key_ok[:, None, None, :] & np.ones((1, 1, T, 1), dtype=bool)

    def hidden_states(self, batch: dict[str, np.ndarray], train: bool = False, rng=None) -> Tensor:
        """Final-layer (post layer-norm) hidden states, shape B x T x d."""
        cfg = self.config
        p = self.params
        x = self.embed_inputs(batch["codes"], batch["ages"], batch["positions"], batch["t2f"])
        x = ad.dropout(x, cfg.dropout, rng, train)
        T = x.shape[1]
        mask = self._mask(batch["lengths"], T)
        eps = cfg.layer_norm_eps
        for i in range(cfg.n_layers):
            a = ad.layer_norm(x, p[f"blocks.{i}.ln1.gain"], p[f"blocks.{i}.ln1.bias"], eps)
            x = x + self._attention(a, i, mask, train, rng)
            m = ad.layer_norm(x, p[f"blocks.{i}.ln2.gain"], p[f"blocks.{i}.ln2.bias"], eps)
            x = x + self._mlp(m, i, train, rng)
        return ad.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"], eps)

    def decision_logits(self, h: Tensor) -> Tensor:
        return ad.matmul(h, self.params["head.weight"]) + self.params["head.bias"]

    def decision_head(self, h: Tensor) -> Tensor:
        """Shared affine map followed by a sigmoid, applied per row of ``h``."""
        return ad.sigmoid(self.decision_logits(h))

    def forward_logits(self, batch: dict[str, np.ndarray], train: bool = False, rng=None) -> Tensor:
        """Logits B x T x C (evolve) or B x C (cls, decoded at the CLS token)."""
        h = self.hidden_states(batch, train=train, rng=rng)
        if self.config.mode == "cls":
            h = h[:, 0, :]
        return self.decision_logits(h)

    # ------------------------------------------------------------------
    # single-sequence and batched inference

    def forward(self, seq: InputSequence, train_mode: bool = False, rng=None) -> np.ndarray:
        """Prediction series for one prepared sequence: T x C (evolve) or 1 x C (cls)."""
        self.validate_sequence(seq)
        batch = pad_sequences([seq])
        with ad.no_grad():
            logits = self.forward_logits(batch, train=train_mode, rng=rng).data
        probs = ad.stable_sigmoid(logits)
        return probs[0] if self.config.mode == "evolve" else probs

    def extract_position_embeddings(self, seq: InputSequence) -> np.ndarray:
        self.validate_sequence(seq)
        with ad.no_grad():
            return self.hidden_states(pad_sequences([seq])).data[0]

    def _batched(self, seqs: Sequence[InputSequence], batch_size: int, fn):
        order = np.argsort([len(s) for s in seqs], kind="stable")
        out: list = [None] * len(seqs)
        with ad.no_grad():
            for start in range(0, len(order), batch_size):
                idx = order[start : start + batch_size]
                chunk = [seqs[j] for j in idx]
                for s in chunk:
                    self.validate_sequence(s)
                batch = pad_sequences(chunk)
                res = fn(batch)
                for row, j in enumerate(idx):
                    out[j] = res(row, len(seqs[j]))
        return out

    def predict_series(self, seqs: Sequence[InputSequence], batch_size: int = 64) -> list[np.ndarray]:
        """Sigmoid series for many prepared sequences, batched by length."""

        def fn(batch):
            probs = ad.stable_sigmoid(self.forward_logits(batch).data)
            if self.config.mode == "cls":
                return lambda row, n: probs[row : row + 1]
            return lambda row, n: probs[row, :n]

        return self._batched(seqs, batch_size, fn)

    def predict_final(self, seqs: Sequence[InputSequence], batch_size: int = 64) -> np.ndarray:
        """N x C predictions given each person's whole history."""
        return np.stack([s[-1] for s in self.predict_series(seqs, batch_size)])

    def position_embeddings(self, seqs: Sequence[InputSequence], batch_size: int = 64) -> list[np.ndarray]:
        def fn(batch):
            h = self.hidden_states(batch).data
            return lambda row, n: h[row, :n]

        return self._batched(seqs, batch_size, fn)


# ----------------------------------------------------------------------------
# checkpoint format:
#   b"EVLV" | u32 version | u32 len + UTF-8 JSON config |
#   u32 n_params | per param: u16 len + name, u8 ndim, u32 dims..., <f4 data


def save_checkpoint(model: EvolveModel, path: str | Path, extra: dict | None = None) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = {"config": model.config.to_dict()}
    if extra:
        header["extra"] = extra
    cfg = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        enc = name.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, OrderedDict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an Evolve checkpoint (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + n].decode("utf-8"))
    off += n
    config = ModelConfig.from_dict(header["config"])
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return config, state, header.get("extra", {})


def load_checkpoint(path: str | Path, dtype=np.float32) -> EvolveModel:
    config, state, _ = read_checkpoint(path)
    model = EvolveModel(config, dtype=dtype)
    model.load_state_dict(state)
    return model
