"""Episodic training, evaluation and prediction.

Training runs plain SGD (optional momentum, optional global-norm gradient
clipping) over sampled episodes. An "epoch" is a configured number of
episodes, since episodic data has no natural epoch boundary. After each
epoch the mean loss over a fixed set of validation episodes decides early
stopping: training stops once the validation loss exceeds the mean of the
previous five epochs, and the best-validation parameters are returned.

Every random stream is Philox keyed by (seed, stream id[, episode index]),
so training runs, evaluation reports and attention dumps are reproducible
bit-for-bit. Evaluation derives one stream per episode index, which makes
the report independent of how episodes are distributed over workers.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fsar.data import Episode, FeatureSet, VideoFeatures, philox, sample_episode
from fsar.decoder import VideoPrototypes
from fsar.errors import ConfigError, ContractError, DivergenceError
from fsar.matching import video_similarity
from fsar.model import PrototypeModel, init_model
from fsar.objective import LossWeights, class_logits, concat_rows, total_loss
from fsar.tensor import Tensor, load_tensor, no_grad, save_tensor

TRAIN_STREAM = 1
VAL_STREAM = 2
EVAL_STREAM = 3
EARLY_STOP_HISTORY = 5


@dataclass
class RunConfig:
    """All hyperparameters of a run; defaults follow the reference setup."""

    c_way: int = 5
    k_shot: int = 1
    n_query: int | None = None  # None -> one query per class
    frames: int = 8
    boxes_per_frame: int = 3
    dim: int = 64
    heads: int = 4
    ffn_mult: int = 4
    num_global: int = 8
    num_focused: int = 8
    relations: tuple[str, ...] = ("gg", "go", "oo")
    use_positional_encoding: bool = True
    lambda_global: float = 0.5
    lambda_focused: float = 0.5
    ce_weight: float = 1.0
    diversity_weight: float = 0.1
    attention_weight: float = 0.1
    temperature: float = 1.0
    aggregation: str = "mean"
    learning_rate: float = 0.001
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 20
    momentum: float = 0.0
    clip_norm: float | None = 5.0
    max_epochs: int = 10
    episodes_per_epoch: int = 200
    val_episodes: int = 50
    seed: int = 0
    precision: str = "f32"

    @property
    def queries_per_episode(self) -> int:
        return self.c_way if self.n_query is None else self.n_query

    def validate(self) -> None:
        if self.c_way < 2:
            raise ConfigError("c_way must be >= 2")
        for name in ("k_shot", "frames", "dim", "heads", "max_epochs",
                     "episodes_per_epoch", "val_episodes", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.queries_per_episode < 1:
            raise ConfigError("n_query must be >= 1")
        if self.boxes_per_frame < 0:
            raise ConfigError("boxes_per_frame must be >= 0")
        if self.num_global < 0 or self.num_focused < 0 or self.num_global + self.num_focused < 1:
            raise ConfigError("need num_global + num_focused >= 1")
        if not self.relations:
            raise ConfigError("at least one relation must be enabled")
        for r in self.relations:
            if r not in ("gg", "go", "oo"):
                raise ConfigError(f"unknown relation {r!r}")
        if self.aggregation not in ("mean", "max"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.dim % self.heads != 0:
            raise ConfigError("dim must be divisible by heads")
        if self.learning_rate < 0 or self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ConfigError("bad learning-rate schedule")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or null")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            cross_entropy=self.ce_weight,
            diversity=self.diversity_weight,
            attention=self.attention_weight,
        )

    def to_json(self) -> str:
        data = asdict(self)
        data["relations"] = list(self.relations)
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "relations" in data:
            data = dict(data)
            data["relations"] = tuple(data["relations"])
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def build_model(cfg: RunConfig) -> PrototypeModel:
    return init_model(
        dim=cfg.dim,
        heads=cfg.heads,
        num_global=cfg.num_global,
        num_focused=cfg.num_focused,
        relations=cfg.relations,
        use_positional_encoding=cfg.use_positional_encoding,
        ffn_mult=cfg.ffn_mult,
        precision=cfg.precision,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def episode_forward(model: PrototypeModel, episode: Episode, cfg: RunConfig):
    """Encode every video once, build the query logits matrix.

    Returns (logits [N x C], labels, prototypes of all episode videos).
    """
    support_protos = [[model.encode(v) for v in shots] for shots in episode.support]
    query_protos = [model.encode(v) for v in episode.query]
    rows = [
        class_logits(qp, support_protos, cfg.lambda_global, cfg.lambda_focused, cfg.aggregation)
        for qp in query_protos
    ]
    logits = rows[0] if len(rows) == 1 else concat_rows(rows)
    all_protos: list[VideoPrototypes] = [p for shots in support_protos for p in shots]
    all_protos.extend(query_protos)
    return logits, list(episode.query_labels), all_protos


def episode_loss(model: PrototypeModel, episode: Episode, cfg: RunConfig):
    logits, labels, protos = episode_forward(model, episode, cfg)
    return total_loss(logits, labels, protos, cfg.loss_weights(), cfg.temperature)


def predict(episode: Episode, model: PrototypeModel, cfg: RunConfig) -> list[int]:
    """Assign each query the class of its most similar support video.

    Ties resolve toward the lowest support index (class-major order).
    """
    with no_grad():
        flat: list[tuple[int, VideoPrototypes]] = []
        for c, shots in enumerate(episode.support):
            for v in shots:
                flat.append((c, model.encode(v)))
        preds = []
        for q in episode.query:
            qp = model.encode(q)
            scores = np.array(
                [video_similarity(qp, sp, cfg.lambda_global, cfg.lambda_focused).value
                 for _, sp in flat]
            )
            preds.append(flat[int(np.argmax(scores))][0])
        return preds


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: PrototypeModel
    config: RunConfig
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    history: list[dict] = field(default_factory=list)
    train_classes: list[str] = field(default_factory=list)
    rng_state: dict | None = None
    stopped_early: bool = False


def _check_compatible(fs: FeatureSet, cfg: RunConfig, role: str) -> None:
    if (fs.frames, fs.dim) != (cfg.frames, cfg.dim) or fs.boxes_per_frame != cfg.boxes_per_frame:
        raise ConfigError(
            f"{role} set has (T={fs.frames}, B={fs.boxes_per_frame}, d={fs.dim}), "
            f"config wants (T={cfg.frames}, B={cfg.boxes_per_frame}, d={cfg.dim})"
        )


def _sgd_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray],
              lr: float, momentum: float, clip_norm: float | None) -> None:
    grads = {name: t.grad for name, t in params.items() if t.grad is not None}
    if clip_norm is not None:
        sq = 0.0
        for g in grads.values():
            sq += float((g.astype(np.float64) ** 2).sum())
        norm = sq**0.5
        if norm > clip_norm:
            factor = clip_norm / norm
            grads = {name: g * factor for name, g in grads.items()}
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if momentum > 0.0:
            v = velocity.get(name)
            v = g if v is None else momentum * v + g
            velocity[name] = v
            step = v
        else:
            step = g
        t.data = t.data - (lr * step).astype(t.dtype)
        t.grad = None


def train(
    train_set: FeatureSet,
    val_set: FeatureSet,
    cfg: RunConfig,
    progress: Callable[[str], None] | None = None,
) -> TrainResult:
    """Episodic SGD with step-decayed learning rate and early stopping."""
    cfg.validate()
    _check_compatible(train_set, cfg, "train")
    _check_compatible(val_set, cfg, "val")

    model = build_model(cfg)
    params = model.parameters()
    velocity: dict[str, np.ndarray] = {}

    rng_train = philox(cfg.seed, TRAIN_STREAM)
    rng_val = philox(cfg.seed, VAL_STREAM)
    n_query = cfg.queries_per_episode
    val_episodes = [
        sample_episode(val_set, cfg.c_way, cfg.k_shot, n_query, rng_val)
        for _ in range(cfg.val_episodes)
    ]

    history: list[dict] = []
    val_losses: list[float] = []
    best_val = float("inf")
    best_epoch = 0
    best_params = model.snapshot()
    stopped_early = False
    episode_counter = 0

    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.learning_rate * cfg.lr_decay_factor ** ((epoch - 1) // cfg.lr_decay_every)
        for _ in range(cfg.episodes_per_epoch):
            episode = sample_episode(train_set, cfg.c_way, cfg.k_shot, n_query, rng_train)
            loss, _ = episode_loss(model, episode, cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, episode {episode_counter}"
                )
            loss.backward()
            _sgd_step(params, velocity, lr, cfg.momentum, cfg.clip_norm)
            episode_counter += 1
            history.append(
                {"split": "train", "epoch": epoch, "episode": episode_counter, "loss": value}
            )

        with no_grad():
            val_loss = float(
                np.mean([episode_loss(model, ep, cfg)[0].item() for ep in val_episodes])
            )
        history.append({"split": "val", "epoch": epoch, "episode": episode_counter, "loss": val_loss})
        if progress:
            progress(f"epoch {epoch}: lr={lr:g} val_loss={val_loss:.6f}")

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = model.snapshot()
        if len(val_losses) >= EARLY_STOP_HISTORY:
            reference = float(np.mean(val_losses[-EARLY_STOP_HISTORY:]))
            if val_loss > reference:
                val_losses.append(val_loss)
                stopped_early = True
                if progress:
                    progress(f"early stop at epoch {epoch} (val {val_loss:.6f} > mean {reference:.6f})")
                break
        val_losses.append(val_loss)

    model.load_parameter_data(best_params)
    return TrainResult(
        model=model,
        config=cfg,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        epochs_run=epoch,
        history=history,
        train_classes=train_set.classes,
        rng_state=_rng_state_to_json(rng_train),
        stopped_early=stopped_early,
    )


def save_loss_curve(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "epoch", "episode", "loss"])
        for row in history:
            writer.writerow([row["split"], row["epoch"], row["episode"], repr(row["loss"])])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=lambda o: np.asarray(o).tolist()))


@dataclass
class Checkpoint:
    model: PrototypeModel
    config: RunConfig
    epoch: int
    train_classes: list[str]
    rng_state: dict | None = None


def save_checkpoint(ckpt: Checkpoint, out_dir) -> Path:
    out_dir = Path(out_dir)
    param_dir = out_dir / "params"
    param_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, tensor in ckpt.model.parameters().items():
        fname = name.replace(".", "_") + ".fsar"
        save_tensor(param_dir / fname, tensor.data)
        files[name] = f"params/{fname}"
    meta = {
        "config": json.loads(ckpt.config.to_json()),
        "epoch": ckpt.epoch,
        "train_classes": ckpt.train_classes,
        "rng_state": ckpt.rng_state,
        "parameters": files,
    }
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


def load_checkpoint(ckpt_dir) -> Checkpoint:
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"checkpoint meta not found: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    cfg = RunConfig.from_dict(meta["config"])
    model = build_model(cfg)
    values = {name: load_tensor(ckpt_dir / rel) for name, rel in meta["parameters"].items()}
    model.load_parameter_data(values)
    return Checkpoint(
        model=model,
        config=cfg,
        epoch=meta["epoch"],
        train_classes=list(meta["train_classes"]),
        rng_state=meta.get("rng_state"),
    )


def checkpoint_from_result(result: TrainResult) -> Checkpoint:
    return Checkpoint(
        model=result.model,
        config=result.config,
        epoch=result.best_epoch,
        train_classes=result.train_classes,
        rng_state=result.rng_state,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    episodes: int
    queries: int
    accuracy: float
    ci95: tuple[float, float]
    per_class: dict[str, float]
    seed: int
    per_episode: list[float] | None = None

    def to_json(self) -> str:
        data = {
            "episodes": self.episodes,
            "queries": self.queries,
            "accuracy": self.accuracy,
            "ci95": list(self.ci95),
            "per_class_accuracy": self.per_class,
            "seed": self.seed,
        }
        if self.per_episode is not None:
            data["per_episode_accuracy"] = self.per_episode
        return json.dumps(data, indent=2, sort_keys=True) + "\n"


def binomial_ci95(p: float, n: int) -> tuple[float, float]:
    if n <= 0:
        return (0.0, 1.0)
    half = 1.96 * (p * (1.0 - p) / n) ** 0.5
    return (max(0.0, p - half), min(1.0, p + half))


def evaluate(
    ckpt: Checkpoint,
    test_set: FeatureSet,
    episodes: int,
    seed: int,
    workers: int = 1,
    allow_class_overlap: bool = False,
    keep_per_episode: bool = False,
) -> EvalReport:
    """Mean accuracy over freshly sampled test episodes, deterministic in seed."""
    cfg = ckpt.config
    _check_compatible(test_set, cfg, "test")
    overlap = set(ckpt.train_classes) & set(test_set.classes)
    if overlap and not allow_class_overlap:
        raise ContractError(
            f"test classes overlap training classes: {sorted(overlap)} "
            "(pass allow_class_overlap to override)"
        )
    n_query = cfg.queries_per_episode

    def run_one(index: int) -> tuple[int, int, list[tuple[str, bool]]]:
        rng = philox(seed, EVAL_STREAM, index)
        episode = sample_episode(test_set, cfg.c_way, cfg.k_shot, n_query, rng)
        preds = predict(episode, ckpt.model, cfg)
        outcomes = []
        correct = 0
        for pred, true, video in zip(preds, episode.query_labels, episode.query):
            ok = pred == true
            correct += ok
            outcomes.append((video.label, ok))
        return correct, len(preds), outcomes

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, range(episodes)))
    else:
        results = [run_one(i) for i in range(episodes)]

    total_correct = 0
    total_queries = 0
    per_class_hits: dict[str, list[int]] = {}
    per_episode: list[float] = []
    for correct, count, outcomes in results:
        total_correct += correct
        total_queries += count
        per_episode.append(correct / count)
        for label, ok in outcomes:
            per_class_hits.setdefault(label, []).append(int(ok))
    accuracy = total_correct / total_queries if total_queries else 0.0
    per_class = {
        label: float(np.mean(hits)) for label, hits in sorted(per_class_hits.items())
    }
    return EvalReport(
        episodes=episodes,
        queries=total_queries,
        accuracy=accuracy,
        ci95=binomial_ci95(accuracy, total_queries),
        per_class=per_class,
        seed=seed,
        per_episode=per_episode if keep_per_episode else None,
    )


# ---------------------------------------------------------------------------
# attention inspection
# ---------------------------------------------------------------------------


def inspect_attention(model: PrototypeModel, video: VideoFeatures) -> dict[str, np.ndarray]:
    """Per-prototype attention averaged within each frame.

    Every attention row distributes over the encoded rows; entries mapping
    to the same frame (across relations and object slots) are averaged,
    giving one weight per frame per prototype.
    """
    from fsar.decoder import decode_prototypes

    with no_grad():
        encoded = model.encode_rows(video)
        protos = decode_prototypes(encoded, model.decoder)
    frames = encoded.frames
    frame_of_row = np.array([origin[1] for origin in encoded.origins])

    def frame_average(attn_rows: np.ndarray) -> list[np.ndarray]:
        out = []
        for row in attn_rows:
            avg = np.array([row[frame_of_row == t].mean() for t in range(frames)])
            out.append(avg)
        return out

    profile: dict[str, np.ndarray] = {}
    for k, avg in enumerate(frame_average(protos.global_attn.data)):
        profile[f"global_{k}"] = avg
    for k, avg in enumerate(frame_average(protos.focused_attn.data)):
        profile[f"focused_{k}"] = avg
    return profile


def write_attention_csv(profile: dict[str, np.ndarray], path) -> None:
    frames = len(next(iter(profile.values())))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prototype"] + [f"frame_{t}" for t in range(frames)])
        for name, weights in profile.items():
            writer.writerow([name] + [repr(float(w)) for w in weights])
