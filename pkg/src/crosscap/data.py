"""Synthetic paired corpus: topic-conditioned "mel-like" feature tracks,
noisy topic-worded lyrics, and templated captions describing the track.

Each track is background noise plus one or more motif windows.  One
window carries the track's own topic signature; the remaining ``decoys``
carry signatures of topics drawn from other pairs.  Window positions are
shuffled, every window oscillates at the same track-level tempo
amplitude, and decoy strength equals motif strength, so nothing inside
the music marks which window is the subject.  The oscillation amplitude
decides the caption's tempo phrase ("fast driving"/"slow drifting"), and
lyrics carry a few tempo cue words that agree with the track only at
rate TEMPO_CUE_CONSISTENCY; the amplitude is the reliable source, the
cues an imperfect textual echo of it.

Each topic's word bank is split in half: lyrics sample only the first
half, captions only the second.  Caption words therefore never appear in
the lyrics, and a captioner cannot copy them from lyric tokens; it has to
recover the underlying topic.  Captions always describe the MUSIC topic.
Lyrics mix in words from a paired confuser topic at rate ``confusion``,
which keeps them an imperfect predictor even of their own topic.  Topics
are paired with their confuser in music space too: pair members share a
strong base signature and differ only by a small private offset.  At
``confusion=0.5`` the lyric word distribution is the same for both
members of a pair, so lyrics pin down the pair but not the member, and
the music alone cannot tell the subject window from a decoy.  The member
is only recoverable by matching: find the one window whose signature
belongs to the lyric pair, then read its private offset.

The correspondence knob ``rho`` is the probability that a track's topic
equals its lyrics' topic; at rho=0 the two are drawn independently, at
rho=1 they always match.

Everything is deterministic given (seed, instance index); instances can be
generated independently and in parallel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_WORD = "<pad>"
BOS_WORD = "<bos>"
EOS_WORD = "<eos>"
UNK_WORD = "<unk>"

CORPUS_FORMAT_VERSION = 1

_TOPIC_BANKS = [
    ["thunder", "rain", "storm", "clouds", "lightning", "wind", "gray",
     "rumble"],
    ["neon", "city", "lights", "midnight", "glow", "electric", "skyline",
     "pulse"],
    ["ocean", "waves", "tide", "salt", "shore", "blue", "drift", "foam"],
    ["desert", "sand", "dunes", "heat", "mirage", "dry", "sun", "dust"],
    ["forest", "moss", "pines", "roots", "green", "shade", "fern", "owls"],
    ["winter", "snow", "frost", "ice", "cold", "white", "sleet", "chill"],
    ["campfire", "embers", "smoke", "crackle", "warm", "ash", "flame",
     "sparks"],
    ["carnival", "brass", "confetti", "parade", "drums", "bright", "spin",
     "cheer"],
    ["subway", "steel", "tunnel", "rattle", "platform", "echo", "rush",
     "wires"],
    ["meadow", "clover", "breeze", "petals", "hum", "soft", "gold",
     "bloom"],
    ["harbor", "gulls", "ropes", "mast", "fog", "brine", "creak",
     "anchor"],
    ["mountain", "granite", "summit", "scree", "thin", "climb", "ridge",
     "stone"],
]

_CONNECTIVES = [
    "a", "the", "of", "with", "and", "over", "under", "through", "about",
    "song", "track", "tune", "feels", "like", "fast", "slow", "steady",
    "quiet", "driving", "drifting",
]

# lyric-side tempo cues; never appear in captions, so the tempo phrase
# cannot be copied token for token
_TEMPO_LYRIC_WORDS = {
    "slow": ["linger", "haze", "lull", "sway"],
    "fast": ["rush", "sprint", "blur", "jolt"],
}

# each lyric carries this many cue words, each matching the song's tempo
# only with probability TEMPO_CUE_CONSISTENCY; the music amplitude is the
# clean source
TEMPO_CUE_COUNT = 2
TEMPO_CUE_CONSISTENCY = 0.75

# {tempo} becomes a two-word phrase from the track's amplitude, {w} comes
# from the music topic's word bank; every pattern stays in the 6-16 word
# range after realization
_TEMPLATES = [
    "a {tempo} {w} song with {w} and {w}",
    "the {tempo} {w} track feels like {w}",
    "{tempo} tune about {w} and {w} over {w}",
    "a {tempo} song of {w} {w} and {w}",
    "the {w} and {w} track feels {tempo} and {w}",
    "steady {tempo} song through {w} {w} and {w} of {w}",
]

TEMPO_WORDS = ("slow", "fast")

_TEMPO_PHRASES = {"slow": "slow drifting", "fast": "fast driving"}


@dataclass
class TopicSpec:
    id: int
    words: list
    unigram: np.ndarray  # over ``words``, sums to 1
    music_mean: np.ndarray  # [n_feat]
    osc_freq: float
    osc_dir: np.ndarray  # unit [n_feat]
    templates: list

    def __post_init__(self):
        self.unigram = np.asarray(self.unigram, dtype=np.float64)
        self.music_mean = np.asarray(self.music_mean, dtype=np.float64)
        self.osc_dir = np.asarray(self.osc_dir, dtype=np.float64)
        if abs(self.unigram.sum() - 1.0) > 1e-12:
            raise ValueError(
                f"topic {self.id} unigram sums to {self.unigram.sum()!r}"
            )

    # lyrics and captions draw from disjoint halves of the bank so caption
    # words can never be copied straight off the lyric tokens
    @property
    def lyric_words(self):
        return self.words[: len(self.words) // 2]

    @property
    def caption_words(self):
        return self.words[len(self.words) // 2:]

    def lyric_unigram(self):
        probs = self.unigram[: len(self.words) // 2]
        return probs / probs.sum()


@dataclass
class SongInstance:
    music: np.ndarray  # [l_raw, n_feat]
    lyrics: list  # token ids, BOS..EOS
    caption: list  # token ids, BOS..EOS
    music_topic: int
    lyric_topic: int
    motif_start: int  # first raw frame of the subject window
    decoy_topics: list = field(default_factory=list)
    decoy_starts: list = field(default_factory=list)


class Vocab:
    """Word/id bijection with fixed reserved ids."""

    def __init__(self, words):
        reserved = [PAD_WORD, BOS_WORD, EOS_WORD, UNK_WORD]
        for w in reserved:
            if w in words:
                raise ValueError(f"reserved word {w!r} in vocabulary input")
        self.id_to_word = reserved + list(words)
        if len(set(self.id_to_word)) != len(self.id_to_word):
            raise ValueError("duplicate words in vocabulary")
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}

    def __len__(self):
        return len(self.id_to_word)

    def __eq__(self, other):
        return isinstance(other, Vocab) and \
            self.id_to_word == other.id_to_word

    def encode(self, text):
        """Whitespace tokenization to [BOS, ids..., EOS]; unknowns → UNK."""
        ids = [self.word_to_id.get(w, UNK_ID) for w in text.split()]
        return [BOS_ID] + ids + [EOS_ID]

    def decode(self, ids):
        """Ids back to text, dropping PAD/BOS/EOS."""
        words = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            words.append(self.id_to_word[i])
        return " ".join(words)


@dataclass
class Corpus:
    instances: list
    vocab: Vocab
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.instances)


def confuser_of(topic_id, n_topics):
    """The paired topic whose words leak into this topic's lyrics."""
    partner = topic_id ^ 1
    return partner if partner < n_topics else (topic_id + 1) % n_topics


# a topic's motif signature is its pair's shared base plus a small private
# offset; spotting the pair is easy, telling the members apart is not
MEMBER_OFFSET_SCALE = 0.35


def make_topics(n_topics, n_feat=16, seed=0):
    if n_topics < 2:
        raise ValueError(f"need at least 2 topics, got {n_topics}")
    rng = np.random.default_rng([seed, 0, 1])
    bases = rng.normal(0.0, 1.0, ((n_topics + 1) // 2, n_feat))
    topics = []
    for i in range(n_topics):
        if i < len(_TOPIC_BANKS):
            words = list(_TOPIC_BANKS[i])
        else:
            words = [f"theme{i}x{j}" for j in range(8)]
        probs = rng.dirichlet(np.full(len(words), 3.0))
        probs = probs / probs.sum()
        mean = bases[i // 2] + \
            MEMBER_OFFSET_SCALE * rng.normal(0.0, 1.0, n_feat)
        direction = rng.normal(0.0, 1.0, n_feat)
        direction /= np.linalg.norm(direction)
        topics.append(TopicSpec(
            id=i,
            words=words,
            unigram=probs,
            music_mean=mean,
            # slow enough to survive the encoder's temporal downsampling
            osc_freq=float(rng.uniform(0.02, 0.12)),
            osc_dir=direction,
            # one template per topic: caption style tracks the subject,
            # so caption metrics stay sensitive to subject identity
            # instead of averaging over styles
            templates=[_TEMPLATES[i % len(_TEMPLATES)]],
        ))
    return topics


def build_vocab(topics):
    words = list(_CONNECTIVES)
    for tempo in TEMPO_WORDS:
        words.extend(_TEMPO_LYRIC_WORDS[tempo])
    for topic in topics:
        for w in topic.words:
            if w not in words:
                words.append(w)
    return Vocab(words)


_DEFAULT_LENGTHS = {"l_raw": 64, "lyric_min": 8, "lyric_max": 24,
                    "motif_len": 24}

# amplitude of the feature oscillation by tempo class; the gap is what the
# caption's tempo word has to be recovered from
_TEMPO_AMPLITUDE = {"slow": 0.4, "fast": 1.6}

NOISE_SIGMA = 0.1


def _realize_caption(template, topic, tempo_word, rng):
    n_slots = template.count("{w}")
    pool = topic.caption_words
    picks = rng.choice(len(pool), size=n_slots,
                       replace=len(pool) < n_slots)
    text = template.replace("{tempo}", _TEMPO_PHRASES[tempo_word])
    for j in picks:
        text = text.replace("{w}", pool[int(j)], 1)
    return text


def generate_instance(index, seed, rho, topics, vocab, lengths=None,
                      confusion=0.3, decoys=1):
    """One (music, lyrics, caption) triple, pure in (seed, index).

    Draw order is part of the contract: lyric topic, match coin, music
    topic, tempo coin, alternate tempo coin, decoy pairs then members,
    per-slot window jitters, subject slot, background noise, per-slot
    phases, lyric length, per-word source coins and picks, cue coins,
    picks and slots, template, caption slots.
    """
    lengths = {**_DEFAULT_LENGTHS, **(lengths or {})}
    n_topics = len(topics)
    rng = np.random.default_rng([seed, 1, index])

    lyric_topic = int(rng.integers(n_topics))
    matched = rng.random() < rho
    music_topic = lyric_topic if matched else int(rng.integers(n_topics))

    tempo_word = TEMPO_WORDS[int(rng.random() < 0.5)]
    # unmatched lyrics describe some other song with its own tempo, so the
    # cue words must not leak the track's tempo through rho=0 pairings
    alt_tempo = TEMPO_WORDS[int(rng.random() < 0.5)]
    cue_tempo = tempo_word if matched else alt_tempo
    amp = _TEMPO_AMPLITUDE[tempo_word]
    mt = topics[music_topic]
    l_raw = lengths["l_raw"]
    motif_len = min(lengths["motif_len"], l_raw)
    n_windows = 1 + decoys
    if n_windows * motif_len > l_raw:
        raise ValueError(
            f"{n_windows} windows of {motif_len} frames do not fit in "
            f"{l_raw}"
        )
    # decoys come from distinct other pairs, so exactly one window can
    # belong to the lyric pair and no two windows share a pair (two
    # windows of one pair would mark the remaining window as the
    # subject); sampling them independently of the member keeps the
    # member unreadable from the music alone
    other_pairs = sorted({t // 2 for t in range(n_topics)}
                         - {music_topic // 2})
    if decoys > len(other_pairs):
        raise ValueError(
            f"{decoys} decoys need {decoys} other pairs, have "
            f"{len(other_pairs)}"
        )
    decoy_topics = []
    if decoys:
        picks = rng.choice(len(other_pairs), size=decoys, replace=False)
        for j in picks:
            members = [t for t in range(n_topics)
                       if t // 2 == other_pairs[int(j)]]
            decoy_topics.append(members[int(rng.integers(len(members)))])
    # one window per equal segment of the track, jittered within its
    # segment; the subject lands in a uniform slot so position says
    # nothing about which window it is
    seg = l_raw // n_windows
    starts = [w * seg + int(rng.integers(0, seg - motif_len + 1))
              for w in range(n_windows)]
    subject_slot = int(rng.integers(n_windows))
    n_feat = mt.music_mean.shape[0]
    music = rng.normal(0.0, NOISE_SIGMA, (l_raw, n_feat))
    t = np.arange(motif_len)
    decoy_iter = iter(decoy_topics)
    decoy_starts = []
    for slot in range(n_windows):
        if slot == subject_slot:
            wt = mt
        else:
            wt = topics[next(decoy_iter)]
            decoy_starts.append(starts[slot])
        phase = rng.uniform(0.0, 2.0 * math.pi)
        wave = amp * np.sin(2.0 * math.pi * wt.osc_freq * t + phase)
        music[starts[slot]:starts[slot] + motif_len] += (
            wt.music_mean[None, :] + wave[:, None] * wt.osc_dir[None, :])
    motif_start = starts[subject_slot]

    lt = topics[lyric_topic]
    ct = topics[confuser_of(lyric_topic, n_topics)]
    n_words = int(rng.integers(lengths["lyric_min"],
                               lengths["lyric_max"] + 1))
    words = []
    for _ in range(n_words):
        src = ct if rng.random() < confusion else lt
        pool = src.lyric_words
        words.append(pool[int(rng.choice(len(pool),
                                         p=src.lyric_unigram()))])
    for _ in range(TEMPO_CUE_COUNT):
        if rng.random() < TEMPO_CUE_CONSISTENCY:
            bank = _TEMPO_LYRIC_WORDS[cue_tempo]
        else:
            other = "fast" if cue_tempo == "slow" else "slow"
            bank = _TEMPO_LYRIC_WORDS[other]
        cue = bank[int(rng.integers(len(bank)))]
        words.insert(int(rng.integers(len(words) + 1)), cue)
    lyrics = vocab.encode(" ".join(words))

    template = mt.templates[int(rng.integers(len(mt.templates)))]
    caption = vocab.encode(_realize_caption(template, mt, tempo_word, rng))

    return SongInstance(music=music, lyrics=lyrics, caption=caption,
                        music_topic=music_topic, lyric_topic=lyric_topic,
                        motif_start=motif_start, decoy_topics=decoy_topics,
                        decoy_starts=decoy_starts)


def generate_corpus(n, seed, rho, topics, lengths=None, confusion=0.3,
                    decoys=1):
    """Corpus of ``n`` instances; see module docstring for semantics."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if len(topics) < 2:
        raise ValueError(f"need at least 2 topics, got {len(topics)}")
    vocab = build_vocab(topics)
    instances = [
        generate_instance(i, seed, rho, topics, vocab, lengths, confusion,
                          decoys)
        for i in range(n)
    ]
    meta = {
        "n": n,
        "seed": seed,
        "rho": rho,
        "n_topics": len(topics),
        "n_feat": int(topics[0].music_mean.shape[0]),
        "confusion": confusion,
        "decoys": decoys,
        "lengths": {**_DEFAULT_LENGTHS, **(lengths or {})},
    }
    return Corpus(instances=instances, vocab=vocab, meta=meta)


# ---------------------------------------------------------------------------
# On-disk formats: corpus JSONL with a header line; topic specs as JSON
# ---------------------------------------------------------------------------


def save_corpus(corpus, path):
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "kind": "corpus",
            "version": CORPUS_FORMAT_VERSION,
            "meta": corpus.meta,
            "vocab": corpus.vocab.id_to_word[4:],  # reserved ids implicit
        }
        f.write(json.dumps(header) + "\n")
        for inst in corpus.instances:
            f.write(json.dumps({
                "music": inst.music.tolist(),
                "lyrics": list(map(int, inst.lyrics)),
                "caption": list(map(int, inst.caption)),
                "music_topic": inst.music_topic,
                "lyric_topic": inst.lyric_topic,
                "motif_start": inst.motif_start,
                "decoy_topics": list(map(int, inst.decoy_topics)),
                "decoy_starts": list(map(int, inst.decoy_starts)),
            }) + "\n")


def load_corpus(path):
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file, expected a corpus header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line 1: bad header: {exc}") from exc
    if header.get("kind") != "corpus":
        raise ValueError(f"{path}: line 1: not a corpus file")
    if header.get("version") != CORPUS_FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported corpus version {header.get('version')}"
        )
    vocab = Vocab(header["vocab"])
    instances = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            instances.append(SongInstance(
                music=np.asarray(rec["music"], dtype=np.float64),
                lyrics=[int(x) for x in rec["lyrics"]],
                caption=[int(x) for x in rec["caption"]],
                music_topic=int(rec["music_topic"]),
                lyric_topic=int(rec["lyric_topic"]),
                motif_start=int(rec["motif_start"]),
                decoy_topics=[int(x) for x in rec.get("decoy_topics", [])],
                decoy_starts=[int(x) for x in rec.get("decoy_starts", [])],
            ))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return Corpus(instances=instances, vocab=vocab,
                  meta=header.get("meta", {}))


def save_topics(topics, path):
    payload = [{
        "id": t.id,
        "words": t.words,
        "unigram": t.unigram.tolist(),
        "music_mean": t.music_mean.tolist(),
        "osc_freq": t.osc_freq,
        "osc_dir": t.osc_dir.tolist(),
        "templates": t.templates,
    } for t in topics]
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"kind": "topics", "topics": payload}, f, indent=1)


def load_topics(path):
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("kind") != "topics":
        raise ValueError(f"{path}: not a topic spec file")
    return [TopicSpec(**rec) for rec in payload["topics"]]
