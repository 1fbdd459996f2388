"""Music-to-caption architecture: a conv/transformer music encoder, a
transformer lyrics encoder, a contrastive alignment head over pooled
latents, cross-attention fusion of the two streams, and an autoregressive
caption decoder.

The training objective is the teacher-forced caption loss plus ``alpha``
times the batch contrastive loss between the pooled music and lyric latent
codes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .nn import Module
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CCKP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Dimensions and fixed hyperparameters of the architecture."""

    n_feat: int = 16
    d_m: int = 64
    d_t: int = 64
    d_z: int = 64
    d_k: int = 64
    d_ff: int = 128
    heads: int = 4
    n_music_layers: int = 2
    n_lyric_layers: int = 2
    n_decoder_layers: int = 2
    conv_layers: tuple = ((4, 2), (4, 2))  # (width, stride) per conv
    vocab_size: int = 200
    max_len: int = 64
    tau: float = 0.07
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        self.conv_layers = tuple(tuple(layer) for layer in self.conv_layers)
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentCode:
    """Unit-norm pooled latent per modality, shape [d_z] each."""

    z_m: Tensor
    z_t: Tensor


@dataclass
class LossBreakdown:
    total: Tensor
    caption: float
    contrastive: float


@dataclass
class AttentionExport:
    """Fusion attention matrix with the labels needed to plot it."""

    attn: np.ndarray  # [l_t, l_m]
    lyric_tokens: list
    music_frames: list

    def mean_row_entropy(self):
        p = self.attn
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(p > 0, np.log(p), 0.0)
        return float(-(p * logs).sum(axis=1).mean())


def l2_normalize(z):
    ss = T.sum_all(T.mul(z, z))
    inv = T.power(T.add(ss, Tensor(np.asarray(1e-24))), -0.5)
    return T.mul(z, inv)


def contrastive_loss(Z_m, Z_t, tau, symmetric=False):
    """Batch alignment loss: softmax classification of the matching row.

    ``Z_m`` and ``Z_t`` are [n, d_z] with unit-norm rows.  Row i of the
    similarity matrix is scored against all n candidates (itself included)
    and the loss is the batch-mean negative log probability of the true
    pairing.  ``symmetric=True`` averages both matching directions;
    the default scores music-to-text only.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = Z_m.shape[0]
    if Z_t.shape[0] != n:
        raise ValueError(
            f"latent batches differ in size: {Z_m.shape} vs {Z_t.shape}"
        )
    logits = T.scale(T.matmul(Z_m, T.transpose(Z_t)), 1.0 / tau)
    targets = np.arange(n)
    loss = T.cross_entropy_with_logits(logits, targets)
    if symmetric:
        reverse = T.cross_entropy_with_logits(T.transpose(logits), targets)
        loss = T.scale(T.add(loss, reverse), 0.5)
    return loss


class MusicEncoder(Module):
    """Strided conv front-end followed by transformer layers.

    Output length is the input length divided by the product of conv
    strides; inputs shorter than that product are rejected.
    """

    def __init__(self, cfg, rng):
        convs = []
        in_ch = cfg.n_feat
        for width, stride in cfg.conv_layers:
            convs.append(nn.Conv1d(in_ch, cfg.d_m, width, stride, rng))
            in_ch = cfg.d_m
        self.convs = convs
        self.position_table = nn.uniform_init((cfg.max_len, cfg.d_m),
                                              cfg.d_m, rng)
        self.layers = [nn.EncoderLayer(cfg.d_m, cfg.d_ff, cfg.heads, rng)
                       for _ in range(cfg.n_music_layers)]
        self.final_norm = nn.LayerNorm(cfg.d_m)
        self.total_stride = int(np.prod([s for _, s in cfg.conv_layers]))
        self.max_len = cfg.max_len

    def __call__(self, features):
        if not isinstance(features, Tensor):
            features = Tensor(features)
        l_raw = features.shape[0]
        if l_raw < self.total_stride:
            raise ValueError(
                f"music input length {l_raw} is shorter than the total "
                f"front-end stride {self.total_stride}"
            )
        h = features
        for conv in self.convs:
            h = T.tanh(conv(h))
        l_m = h.shape[0]
        if l_m > self.max_len:
            raise ValueError(
                f"encoded music length {l_m} exceeds maximum {self.max_len}"
            )
        h = T.add(h, T.gather_rows(self.position_table, np.arange(l_m)))
        for layer in self.layers:
            h = layer(h)
        return self.final_norm(h)


class LyricsEncoder(Module):
    def __init__(self, cfg, rng):
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.max_len,
                                      cfg.d_t, rng)
        self.layers = [nn.EncoderLayer(cfg.d_t, cfg.d_ff, cfg.heads, rng)
                       for _ in range(cfg.n_lyric_layers)]
        self.final_norm = nn.LayerNorm(cfg.d_t)

    def __call__(self, tokens):
        h = self.embedding(tokens)
        for layer in self.layers:
            h = layer(h)
        return self.final_norm(h)


class AlignmentHead(Module):
    """Linear projections of mean-pooled encoder outputs to a shared
    unit-norm latent space."""

    def __init__(self, cfg, rng):
        self.project_music = nn.Linear(cfg.d_m, cfg.d_z, rng, bias=False)
        self.project_lyrics = nn.Linear(cfg.d_t, cfg.d_z, rng, bias=False)
        self.tau = cfg.tau

    def music_latent(self, h_m):
        pooled = T.reshape(T.mean_pool(h_m), (1, -1))
        return l2_normalize(T.reshape(self.project_music(pooled), (-1,)))

    def lyric_latent(self, h_t):
        pooled = T.reshape(T.mean_pool(h_t), (1, -1))
        return l2_normalize(T.reshape(self.project_lyrics(pooled), (-1,)))


class CaptionDecoder(Module):
    def __init__(self, cfg, rng):
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.max_len,
                                      cfg.d_t, rng)
        self.layers = [nn.DecoderLayer(cfg.d_t, cfg.d_ff, cfg.heads, rng)
                       for _ in range(cfg.n_decoder_layers)]
        self.final_norm = nn.LayerNorm(cfg.d_t)
        self.out_proj = nn.Linear(cfg.d_t, cfg.vocab_size, rng)

    def __call__(self, tokens, memory):
        h = self.embedding(tokens)
        for layer in self.layers:
            h = layer(h, memory)
        return self.out_proj(self.final_norm(h))


class CaptionModel(Module):
    """The full captioner; see module docstring for the dataflow."""

    def __init__(self, config, seed=0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.music_encoder = MusicEncoder(config, rng)
        self.lyrics_encoder = LyricsEncoder(config, rng)
        self.alignment = AlignmentHead(config, rng)
        self.fusion = nn.MultiHeadAttention(config.d_t, config.d_m,
                                            config.d_k, config.d_t,
                                            config.heads, rng)
        self.decoder = CaptionDecoder(config, rng)

    # -- encoders ---------------------------------------------------------

    def encode_music(self, features):
        return self.music_encoder(features)

    def encode_lyrics(self, tokens):
        return self.lyrics_encoder(tokens)

    def project_latents(self, h_m, h_t):
        return LatentCode(z_m=self.alignment.music_latent(h_m),
                          z_t=self.alignment.lyric_latent(h_t))

    # -- fusion and decoding ----------------------------------------------

    def fuse(self, h_t, h_m):
        """Cross-attend lyric queries over music keys/values, residual to
        the lyric stream; returns (fused sequence, attention matrix)."""
        attn_out, weights = self.fusion(h_t, h_m)
        return T.add(h_t, attn_out), weights

    def caption_loss(self, h_f, target):
        """Teacher-forced cross-entropy of the caption given the fused
        memory.  ``target`` is [BOS, words..., EOS] with optional PAD
        tail; PAD positions are ignored."""
        cfg = self.config
        target = np.asarray(target, dtype=np.intp)
        if target.size < 2:
            raise ValueError("caption target needs at least BOS and EOS")
        if target.size > cfg.max_len:
            raise ValueError(
                f"caption length {target.size} exceeds maximum {cfg.max_len}"
            )
        if target[0] != cfg.bos_id:
            raise ValueError("caption target must start with BOS")
        content = target[target != cfg.pad_id]
        if content.size == 0 or content[-1] != cfg.eos_id:
            raise ValueError("caption target must end with EOS")
        logits = self.decoder(target[:-1], h_f)
        return T.cross_entropy_with_logits(logits, target[1:],
                                           ignore_index=cfg.pad_id)

    def instance_caption_loss(self, instance):
        h_m = self.encode_music(instance.music)
        h_t = self.encode_lyrics(instance.lyrics)
        h_f, _ = self.fuse(h_t, h_m)
        return self.caption_loss(h_f, instance.caption)

    def total_loss(self, batch, alpha=0.02, symmetric=False):
        """Caption loss (batch mean) plus ``alpha`` times the contrastive
        alignment loss over the batch latents.

        At ``alpha=0`` the returned total IS the caption loss tensor (the
        alignment head gets no gradient); its value is still reported in
        the breakdown for logging, computed outside the graph.
        """
        if alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {alpha}")
        if not batch:
            raise ValueError("total_loss over an empty batch")
        cap_losses = []
        encoded = []
        for inst in batch:
            h_m = self.encode_music(inst.music)
            h_t = self.encode_lyrics(inst.lyrics)
            h_f, _ = self.fuse(h_t, h_m)
            cap_losses.append(T.reshape(
                self.caption_loss(h_f, inst.caption), (1,)))
            encoded.append((h_m, h_t))
        cap = T.mean_axis(T.concat(cap_losses, axis=0), axis=0)

        def latent_rows():
            zms, zts = [], []
            for h_m, h_t in encoded:
                code = self.project_latents(h_m, h_t)
                zms.append(T.reshape(code.z_m, (1, -1)))
                zts.append(T.reshape(code.z_t, (1, -1)))
            return T.concat(zms, axis=0), T.concat(zts, axis=0)

        if alpha == 0:
            with T.no_grad():
                Z_m, Z_t = latent_rows()
                con_value = float(contrastive_loss(
                    Z_m, Z_t, self.alignment.tau, symmetric).data)
            return LossBreakdown(total=cap, caption=float(cap.data),
                                 contrastive=con_value)

        Z_m, Z_t = latent_rows()
        con = contrastive_loss(Z_m, Z_t, self.alignment.tau, symmetric)
        total = T.add(cap, T.scale(con, alpha))
        return LossBreakdown(total=total, caption=float(cap.data),
                             contrastive=float(con.data))

    def generate(self, features, lyric_tokens, max_len=None,
                 strategy="greedy"):
        """Decode a caption for one (music, lyrics) pair.

        Greedy argmax per step, ties resolved to the lowest token id;
        stops at EOS or ``max_len`` generated tokens.  Returns the
        generated ids (EOS included when produced, BOS not)."""
        cfg = self.config
        if strategy != "greedy":
            raise ValueError(f"unknown decoding strategy: {strategy!r}")
        if max_len is None:
            max_len = cfg.max_len - 1
        if max_len > cfg.max_len - 1:
            raise ValueError(
                f"max_len {max_len} exceeds decodable maximum "
                f"{cfg.max_len - 1}"
            )
        with T.no_grad():
            h_m = self.encode_music(features)
            h_t = self.encode_lyrics(lyric_tokens)
            h_f, _ = self.fuse(h_t, h_m)
            seq = [cfg.bos_id]
            out = []
            while len(out) < max_len:
                logits = self.decoder(seq, h_f)
                next_id = int(np.argmax(logits.data[-1]))
                out.append(next_id)
                seq.append(next_id)
                if next_id == cfg.eos_id:
                    break
        return out

    def export_attention(self, features, lyric_tokens):
        with T.no_grad():
            h_m = self.encode_music(features)
            h_t = self.encode_lyrics(lyric_tokens)
            _, weights = self.fuse(h_t, h_m)
        return AttentionExport(
            attn=weights.data.copy(),
            lyric_tokens=[int(t) for t in lyric_tokens],
            music_frames=list(range(h_m.shape[0])),
        )


# ---------------------------------------------------------------------------
# Checkpoint persistence: magic, version, config JSON, named float64 records
# ---------------------------------------------------------------------------


def save_checkpoint(model, path):
    records = model.named_parameters()
    config_blob = json.dumps(model.config.to_dict(),
                             sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", len(records)))
        for name, t in records:
            blob = name.encode("utf-8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<B", t.data.ndim))
            for dim in t.data.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild a CaptionModel with bit-exact parameters from ``path``."""
    with open(path, "rb") as f:
        raw = f.read()
    try:
        return _parse_checkpoint(raw)
    except (struct.error, IndexError) as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc


def _parse_checkpoint(raw):
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(
            f"bad checkpoint magic {raw[:4]!r}, expected "
            f"{CHECKPOINT_MAGIC!r}"
        )
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {version} unsupported, expected "
            f"{CHECKPOINT_VERSION}"
        )
    (clen,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = ModelConfig.from_dict(json.loads(raw[off:off + clen]))
    off += clen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4

    model = CaptionModel(config, seed=0)
    params = dict(model.named_parameters())
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        nbytes = int(np.prod(dims, dtype=np.int64)) * 8 if ndim else 8
        if name not in params:
            raise ValueError(f"checkpoint names unknown parameter {name!r}")
        target = params[name]
        if tuple(dims) != target.data.shape:
            raise ValueError(
                f"checkpoint shape {tuple(dims)} for {name!r} does not "
                f"match model shape {target.data.shape}"
            )
        if off + nbytes > len(raw):
            raise ValueError(f"checkpoint truncated inside {name!r}")
        target.data = np.frombuffer(
            raw, dtype="<f8", count=max(1, int(np.prod(dims, dtype=np.int64))),
            offset=off).reshape(dims).astype(np.float64)
        off += nbytes
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ValueError(
            f"checkpoint is missing parameters: {sorted(missing)[:3]} ..."
        )
    return model
