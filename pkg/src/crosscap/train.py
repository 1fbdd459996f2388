"""Training loop, evaluation passes, and the two headline experiments:
the independence check (does alignment learn anything when music and
lyrics are unrelated?) and the alpha ablation sweep.

Everything is deterministic given the config seed: batch order, parameter
init, and corpus generation all derive from it, so two runs with the same
config produce byte-identical run logs.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from . import metrics as MX
from . import tensor as T
from .model import CaptionModel, ModelConfig, contrastive_loss, \
    load_checkpoint, save_checkpoint


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    alpha: float = 0.02
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    rho: float = 1.0
    freeze_music_encoder: bool = False
    tau: float = 0.07
    symmetric: bool = False
    grad_clip: float = 1.0
    eval_subset: int = 32  # caption-eval instances per eval pass; 0 disables
    eval_every: int = 1  # epochs between eval passes
    gen_max_len: int = 24

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, "
                             f"got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, "
                             f"got {self.batch_size}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, "
                             f"got {self.eval_every}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adaptive moment optimizer with optional global-norm gradient
    clipping.  Parameters whose grad is None this step are skipped."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip=None):
        self.slots = [
            {"name": n, "param": p, "m": np.zeros_like(p.data),
             "v": np.zeros_like(p.data)}
            for n, p in named_params if p.requires_grad
        ]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip = clip
        self.t = 0

    def params(self):
        return [s["param"] for s in self.slots]

    def step(self):
        self.t += 1
        scale = 1.0
        if self.clip is not None:
            sq = sum(float((s["param"].grad ** 2).sum())
                     for s in self.slots if s["param"].grad is not None)
            norm = math.sqrt(sq)
            if norm > self.clip:
                scale = self.clip / norm
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t
        for s in self.slots:
            g = s["param"].grad
            if g is None:
                continue
            g = g * scale
            s["m"] = b1 * s["m"] + (1.0 - b1) * g
            s["v"] = b2 * s["v"] + (1.0 - b2) * g * g
            m_hat = s["m"] / correct1
            v_hat = s["v"] / correct2
            s["param"].data = s["param"].data - self.lr * m_hat / (
                np.sqrt(v_hat) + self.eps)

    def zero_grads(self):
        for s in self.slots:
            s["param"].grad = None


@dataclass
class RunLog:
    config: dict
    entries: list = field(default_factory=list)

    def log_step(self, step, epoch, breakdown):
        self.entries.append({
            "type": "step", "step": step, "epoch": epoch,
            "caption": breakdown.caption,
            "contrastive": breakdown.contrastive,
            "total": float(breakdown.total.data),
        })

    def log_epoch(self, epoch, **fields):
        self.entries.append({"type": "epoch", "epoch": epoch, **fields})

    def steps(self):
        return [e for e in self.entries if e["type"] == "step"]

    def epochs(self):
        return [e for e in self.entries if e["type"] == "epoch"]

    def to_jsonl(self):
        lines = [json.dumps({"kind": "runlog", "config": self.config})]
        lines.extend(json.dumps(e) for e in self.entries)
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines:
            raise ValueError(f"{path}: empty run log")
        header = json.loads(lines[0])
        if header.get("kind") != "runlog":
            raise ValueError(f"{path}: not a run log")
        log = cls(config=header["config"])
        log.entries = [json.loads(x) for x in lines[1:] if x.strip()]
        return log


@dataclass
class TrainResult:
    model: CaptionModel
    runlog: RunLog
    best_params: dict
    best_epoch: int
    best_score: float
    checkpoint_paths: list = field(default_factory=list)

    def use_best(self):
        """Swap the best-eval parameters into the model (in place)."""
        for name, t in self.model.named_parameters():
            t.data = self.best_params[name].copy()
        return self.model


def strip_special(ids):
    """Drop PAD/BOS/EOS, keeping content tokens (UNK included)."""
    return [i for i in ids if i not in (D.PAD_ID, D.BOS_ID, D.EOS_ID)]


def split_corpus(corpus, n_eval):
    """Deterministic tail split into (train, eval) corpora."""
    if not 0 < n_eval < len(corpus):
        raise ValueError(
            f"eval size {n_eval} must lie strictly inside the corpus "
            f"size {len(corpus)}"
        )
    train = D.Corpus(instances=corpus.instances[:-n_eval],
                     vocab=corpus.vocab,
                     meta={**corpus.meta, "split": "train"})
    evalc = D.Corpus(instances=corpus.instances[-n_eval:],
                     vocab=corpus.vocab,
                     meta={**corpus.meta, "split": "eval"})
    return train, evalc


# ---------------------------------------------------------------------------
# Evaluation passes
# ---------------------------------------------------------------------------


def eval_contrastive(model, corpus, batch_size, symmetric=False):
    """Mean held-out alignment loss over full batches (partial tail batch
    dropped so ln(batch) stays the common scale); falls back to one whole
    batch when the corpus is smaller than ``batch_size``.

    Returns (mean loss, effective batch size).
    """
    instances = corpus.instances
    n = len(instances)
    if n == 0:
        raise ValueError("contrastive evaluation over an empty corpus")
    size = min(batch_size, n)
    losses = []
    with T.no_grad():
        for start in range(0, n - size + 1, size):
            chunk = instances[start:start + size]
            zms, zts = [], []
            for inst in chunk:
                h_m = model.encode_music(inst.music)
                h_t = model.encode_lyrics(inst.lyrics)
                code = model.project_latents(h_m, h_t)
                zms.append(T.reshape(code.z_m, (1, -1)))
                zts.append(T.reshape(code.z_t, (1, -1)))
            loss = contrastive_loss(T.concat(zms, axis=0),
                                    T.concat(zts, axis=0),
                                    model.alignment.tau, symmetric)
            losses.append(float(loss.data))
    return float(np.mean(losses)), size


def evaluate_captions(model, corpus, limit=None, max_len=24):
    """Greedy-decode captions and score them against references.

    Returns (MetricsReport, list of (candidate, reference) id pairs).
    """
    instances = corpus.instances[:limit] if limit else corpus.instances
    if not instances:
        raise ValueError("caption evaluation over an empty corpus")
    pairs = []
    for inst in instances:
        cand = model.generate(inst.music, inst.lyrics, max_len=max_len)
        pairs.append((strip_special(cand), strip_special(inst.caption)))
    return MX.caption_metrics(pairs), pairs


def evaluate_retrieval(model, corpus, k_list, query_field="caption"):
    """Cross-modal retrieval: text latents as queries against the music
    latents of the same corpus; query ``i`` is relevant to item ``i``.

    ``query_field`` picks the text side: "caption" mirrors text-query
    retrieval against tracks, "lyrics" probes the trained pairing itself.
    """
    if query_field not in ("caption", "lyrics"):
        raise ValueError(f"query_field must be 'caption' or 'lyrics', "
                         f"got {query_field!r}")
    instances = corpus.instances
    if not instances:
        raise ValueError("retrieval evaluation over an empty corpus")
    with T.no_grad():
        item_vecs = []
        query_vecs = []
        for inst in instances:
            h_m = model.encode_music(inst.music)
            item_vecs.append(
                model.alignment.music_latent(h_m).data.copy())
            tokens = getattr(inst, query_field)
            h_t = model.encode_lyrics(tokens)
            query_vecs.append(
                model.alignment.lyric_latent(h_t).data.copy())
    relevance = {i: i for i in range(len(instances))}
    return MX.retrieval_eval(query_vecs, item_vecs, relevance,
                             embed=lambda v: v, k_list=k_list)


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------


def _build_model(config, train_corpus, model_config=None):
    if model_config is None:
        n_feat = int(train_corpus.instances[0].music.shape[1])
        model_config = ModelConfig(n_feat=n_feat,
                                   vocab_size=len(train_corpus.vocab),
                                   tau=config.tau)
    return CaptionModel(model_config, seed=config.seed)


def train(config, train_corpus, eval_corpus, model_config=None,
          out_dir=None):
    """Optimize the joint objective; returns a TrainResult whose model
    holds the final parameters and whose ``best_params`` snapshot is the
    eval-selected checkpoint (highest held-out caption overlap, final
    epoch when caption eval is disabled)."""
    if not train_corpus.instances or not eval_corpus.instances:
        raise ValueError("train and eval corpora must be nonempty")
    if train_corpus.vocab != eval_corpus.vocab:
        raise ValueError("train/eval corpora use different vocabularies")

    model = _build_model(config, train_corpus, model_config)
    if config.freeze_music_encoder:
        for _, p in model.music_encoder.named_parameters():
            p.requires_grad = False

    optimizer = Adam(model.named_parameters(), lr=config.learning_rate,
                     clip=config.grad_clip)
    runlog = RunLog(config={
        "train": config.to_dict(),
        "model": model.config.to_dict(),
        "n_train": len(train_corpus),
        "n_eval": len(eval_corpus),
    })

    shuffle_rng = np.random.default_rng([config.seed, 2])
    instances = train_corpus.instances
    step = 0
    best_score = -math.inf
    best_epoch = -1
    best_params = {n: t.data.copy() for n, t in model.named_parameters()}
    checkpoint_paths = []

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(instances))
        for start in range(0, len(order), config.batch_size):
            batch = [instances[i]
                     for i in order[start:start + config.batch_size]]
            optimizer.zero_grads()
            out = model.total_loss(batch, alpha=config.alpha,
                                   symmetric=config.symmetric)
            total = float(out.total.data)
            if not math.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss {total} at step {step} "
                    f"(epoch {epoch})"
                )
            T.backward(out.total)
            optimizer.step()
            runlog.log_step(step, epoch, out)
            step += 1

        do_eval = (epoch + 1) % config.eval_every == 0 \
            or epoch == config.epochs - 1
        if not do_eval:
            continue
        eval_loss, eff_batch = eval_contrastive(
            model, eval_corpus, config.batch_size, config.symmetric)
        mi = MX.mi_lower_bound(eval_loss, eff_batch)
        fields = {"eval_contrastive": eval_loss, "mi_bound": mi,
                  "mi_batch": eff_batch}
        if config.eval_subset > 0:
            report, _ = evaluate_captions(model, eval_corpus,
                                          limit=config.eval_subset,
                                          max_len=config.gen_max_len)
            score = report.rougeL.f1
            fields["eval_rougeL"] = score
            fields["eval_meteor"] = report.meteor
        else:
            score = float(epoch)  # no caption eval: latest epoch wins
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_params = {n: t.data.copy()
                           for n, t in model.named_parameters()}
        fields["best_epoch"] = best_epoch
        runlog.log_epoch(epoch, **fields)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt")
            save_checkpoint(model, path)
            checkpoint_paths.append(path)

    if out_dir is not None:
        final = model
        saved = {n: t.data.copy() for n, t in model.named_parameters()}
        for name, t in final.named_parameters():
            t.data = best_params[name]
        save_checkpoint(final, os.path.join(out_dir, "best.ckpt"))
        for name, t in final.named_parameters():
            t.data = saved[name]
        checkpoint_paths.append(os.path.join(out_dir, "best.ckpt"))
        runlog.save(os.path.join(out_dir, "runlog.jsonl"))

    return TrainResult(model=model, runlog=runlog, best_params=best_params,
                       best_epoch=best_epoch, best_score=best_score,
                       checkpoint_paths=checkpoint_paths)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _trailing_mean(values, k=3):
    tail = values[-k:] if len(values) >= k else values
    return float(np.mean(tail))


def verify_independence(config, n_instances=2000, n_topics=10,
                        n_eval=300, data_seed=0, model_config=None,
                        confusion=0.3, decoys=0):
    """Train twice, once on independent pairings (rho=0) and once on
    matched pairings (rho=1), and report the trailing held-out MI lower
    bound and paired-retrieval precision for both.

    With independent pairings the alignment objective has nothing to
    learn: the MI bound should sit near zero and retrieval at chance.
    With matched pairings both should rise well above those floors.
    Decoy windows default to off here: a decoy halves the information the
    music carries about its subject (the subject window and the decoy are
    interchangeable without the lyrics), and this experiment wants the
    matched-pairing bound well clear of its threshold.
    """
    topics = D.make_topics(n_topics, seed=data_seed)
    report = {"batch_size": config.batch_size,
              "config": config.to_dict(), "runs": {}}
    for rho in (0.0, 1.0):
        corpus = D.generate_corpus(n_instances, seed=data_seed, rho=rho,
                                   topics=topics, confusion=confusion,
                                   decoys=decoys)
        train_c, eval_c = split_corpus(corpus, n_eval)
        run_cfg = TrainConfig(**{**config.to_dict(), "rho": rho})
        result = train(run_cfg, train_c, eval_c,
                       model_config=model_config)
        mi_series = [e["mi_bound"] for e in result.runlog.epochs()]
        retrieval = evaluate_retrieval(result.model, eval_c, k_list=[1],
                                       query_field="lyrics")
        n_items = len(eval_c)
        chance = 1.0 / n_items
        sigma = math.sqrt(chance * (1.0 - chance) / n_items)
        report["runs"][f"rho{int(rho)}"] = {
            "rho": rho,
            "mi_bound_trailing": _trailing_mean(mi_series),
            "mi_bound_series": mi_series,
            "p_at_1": retrieval.precision[1],
            "chance_p_at_1": chance,
            "chance_sigma": sigma,
            "n_eval": n_items,
        }
    r0 = report["runs"]["rho0"]
    r1 = report["runs"]["rho1"]
    half_ln_batch = 0.5 * math.log(config.batch_size)
    report["checks"] = {
        "rho0_mi_near_zero": r0["mi_bound_trailing"] < 0.1,
        "rho0_p1_within_3_sigma": abs(r0["p_at_1"] - r0["chance_p_at_1"])
        <= 3.0 * r0["chance_sigma"],
        "rho1_mi_above_half_ln_batch": r1["mi_bound_trailing"]
        > half_ln_batch,
        "rho1_p1_above_5x_chance": r1["p_at_1"]
        > 5.0 * r1["chance_p_at_1"],
        "half_ln_batch": half_ln_batch,
    }
    return report


SWEEP_COLUMNS = ["alpha", "seed", "rouge1", "rouge2", "rougeL",
                 "meteor_lite", "p@1", "r@5", "mi_bound", "attn_entropy"]

# instances averaged for the attention concentration column
ENTROPY_SAMPLE = 50

DEFAULT_ALPHAS = (0.0, 2e-3, 2e-2, 2e-1, 2.0, 20.0)


def _sweep_run(args):
    (alpha, seed, base_cfg_dict, corpus_args, model_cfg_dict) = args
    topics = D.make_topics(corpus_args["n_topics"],
                           seed=corpus_args["data_seed"])
    corpus = D.generate_corpus(corpus_args["n_instances"],
                               seed=corpus_args["data_seed"],
                               rho=corpus_args["rho"], topics=topics,
                               confusion=corpus_args["confusion"],
                               decoys=corpus_args["decoys"])
    train_c, eval_c = split_corpus(corpus, corpus_args["n_eval"])
    cfg = TrainConfig(**{**base_cfg_dict, "alpha": alpha, "seed": seed})
    model_config = ModelConfig.from_dict(model_cfg_dict) \
        if model_cfg_dict else None
    result = train(cfg, train_c, eval_c, model_config=model_config)
    model = result.use_best()
    report, _ = evaluate_captions(model, eval_c,
                                  max_len=cfg.gen_max_len)
    k_list = [1, 5] if len(eval_c) >= 5 else [1]
    retrieval = evaluate_retrieval(model, eval_c, k_list=k_list)
    eval_loss, eff_batch = eval_contrastive(model, eval_c, cfg.batch_size,
                                            cfg.symmetric)
    entropies = [
        model.export_attention(inst.music, inst.lyrics).mean_row_entropy()
        for inst in eval_c.instances[:ENTROPY_SAMPLE]
    ]
    return {
        "alpha": alpha,
        "seed": seed,
        "rouge1": report.rouge1.f1,
        "rouge2": report.rouge2.f1,
        "rougeL": report.rougeL.f1,
        "meteor_lite": report.meteor,
        "p@1": retrieval.precision[1],
        "r@5": retrieval.recall.get(5, float("nan")),
        "mi_bound": MX.mi_lower_bound(eval_loss, eff_batch),
        "attn_entropy": float(np.mean(entropies)),
    }


def sweep_alpha(alphas, config, seeds=(0, 1, 2), n_instances=480,
                n_topics=6, n_eval=120, data_seed=0, model_config=None,
                jobs=1, confusion=0.5, decoys=1):
    """Full train+eval per (alpha, seed); returns one row dict each.

    The default corpus uses confusion=0.5 with one decoy window: lyrics
    identify only the topic pair, the music alone cannot tell the subject
    window from the decoy, and the member is recoverable only by matching
    lyrics against windows.  That matching is the channel the alignment
    weight acts on, so this is the regime where varying it means
    something.
    """
    corpus_args = {"n_instances": n_instances, "n_topics": n_topics,
                   "n_eval": n_eval, "rho": config.rho,
                   "data_seed": data_seed, "confusion": confusion,
                   "decoys": decoys}
    model_cfg_dict = model_config.to_dict() if model_config else None
    tasks = [(alpha, seed, config.to_dict(), corpus_args, model_cfg_dict)
             for alpha in alphas for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_run, tasks))
    else:
        rows = [_sweep_run(t) for t in tasks]
    return rows


def sweep_rows_to_csv(rows, path, config=None):
    """Write sweep rows as CSV; ``config`` becomes a leading # comment so
    the file records how it was produced."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        if config is not None:
            f.write("# config: " + json.dumps(config, sort_keys=True)
                    + "\n")
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SWEEP_COLUMNS})


def seed_mean(rows, metric):
    """alpha -> mean of ``metric`` over seeds."""
    by_alpha = {}
    for row in rows:
        by_alpha.setdefault(row["alpha"], []).append(row[metric])
    return {a: float(np.mean(v)) for a, v in sorted(by_alpha.items())}
