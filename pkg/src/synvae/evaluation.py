"""Quantitative evaluation battery and listening-study construction.

Covers reconstruction MSE/KL, class precision at rank n, reconstruction
classification, a held-out Donsker-Varadhan lower bound on the mutual
information between the two latent spaces, centroid-based study sampling,
and rater agreement statistics.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import cdist
from torch import nn

from . import model as m
from . import training
from .data import Dataset, save_png_image
from .melody import SynthConfig, repair_melody, tokens_to_midi, tokens_to_wav


@dataclass
class EmbeddingSet:
    """Posterior means with class labels; `source` records which encoder
    produced them."""

    vectors: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    source: str = "visual"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise ValueError("vectors must be (N, D) with one label per row")
        if not np.isfinite(self.vectors).all():
            raise ValueError("embedding contains non-finite entries")


# ---------------------------------------------------------------------------
# Reconstruction paths and embeddings (posterior means end to end)
# ---------------------------------------------------------------------------

@torch.no_grad()
def reconstruct_visual(vis, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(images[start : start + batch_size])
        q = m.encode_visual(x, vis)
        out.append(m.decode_visual(q.mean, vis).numpy())
    return np.concatenate(out)


@torch.no_grad()
def reconstruct_synesthetic(vis, music, images: np.ndarray, steps: int, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(images[start : start + batch_size])
        q_v = m.encode_visual(x, vis)
        dists = m.decode_music(q_v.mean, music, steps)
        q_a = m.encode_music(dists, music)
        out.append(m.decode_visual(q_a.mean, vis).numpy())
    return np.concatenate(out)


def mse_from_reconstructions(images: np.ndarray, recons: np.ndarray) -> float:
    """Mean over images of the per-image sum of squared pixel errors."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    return float(((images - recons) ** 2).sum(axis=1).mean())


def mse_metric(vis, images: np.ndarray, music=None, steps: int = 32) -> float:
    if len(images) == 0:
        raise ValueError("empty dataset")
    if music is None:
        recon = reconstruct_visual(vis, images)
    else:
        recon = reconstruct_synesthetic(vis, music, images, steps)
    return mse_from_reconstructions(images, recon)


@torch.no_grad()
def kl_metric(vis, images: np.ndarray, batch_size: int = 512) -> float:
    """Mean per-image KL(q(z|x) || N(0, I)) in nats."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    total = 0.0
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(images[start : start + batch_size])
        total += m.kl_to_standard_normal(m.encode_visual(x, vis)).sum().item()
    return total / len(images)


@torch.no_grad()
def embed_visual(vis, images: np.ndarray, labels: np.ndarray, batch_size: int = 512) -> EmbeddingSet:
    means = []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(images[start : start + batch_size])
        means.append(m.encode_visual(x, vis).mean.numpy())
    return EmbeddingSet(vectors=np.concatenate(means), labels=labels, source="visual")


@torch.no_grad()
def embed_auditive(vis, music, images: np.ndarray, labels: np.ndarray, steps: int, batch_size: int = 256) -> EmbeddingSet:
    means = []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(images[start : start + batch_size])
        q_v = m.encode_visual(x, vis)
        dists = m.decode_music(q_v.mean, music, steps)
        means.append(m.encode_music(dists, music).mean.numpy())
    return EmbeddingSet(vectors=np.concatenate(means), labels=labels, source="auditive")


@torch.no_grad()
def synesthetic_pairs(vis, music, images: np.ndarray, steps: int, seed: int = 0, batch_size: int = 256):
    """(z_v, z_a) posterior-mean pairs from sampled chained passes, for the
    mutual-information estimator."""
    rng = torch.Generator().manual_seed(seed)
    zv, za = [], []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(images[start : start + batch_size])
        fwd = m.synesthetic_forward(x, vis, music, rng=rng, steps=steps)
        zv.append(fwd.q_v.mean.numpy())
        za.append(fwd.q_a.mean.numpy())
    return np.concatenate(zv), np.concatenate(za)


# ---------------------------------------------------------------------------
# Precision at rank n
# ---------------------------------------------------------------------------

def precision_at_n(emb: EmbeddingSet, n: int) -> float:
    """Average fraction of each point's n nearest Euclidean neighbours
    (self excluded, distance ties broken by index) sharing its label."""
    count = len(emb.vectors)
    if n <= 0 or n >= count:
        raise ValueError(f"n must lie in [1, N-1]; got n={n}, N={count}")
    dist = cdist(emb.vectors, emb.vectors)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :n]
    same = emb.labels[order] == emb.labels[:, None]
    return float(same.mean())


# ---------------------------------------------------------------------------
# Reconstruction classification
# ---------------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-3
    hidden_dim: int = 512
    seed: int = 0


class ReconstructionClassifier(nn.Module):
    """Encoder-shaped trunk with a softmax head."""

    def __init__(self, image_dim: int, hidden_dim: int, n_classes: int):
        super().__init__()
        self.trunk = nn.Linear(image_dim, hidden_dim)
        self.head = nn.Linear(hidden_dim, n_classes)

    def forward(self, x):
        return self.head(torch.tanh(self.trunk(x)))


def train_reconstruction_classifier(recon_train: np.ndarray, labels: np.ndarray, cfg: ClassifierConfig) -> ReconstructionClassifier:
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    torch.manual_seed(cfg.seed)
    clf = ReconstructionClassifier(recon_train.shape[1], cfg.hidden_dim, n_classes)
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.learning_rate)
    shuffler = torch.Generator().manual_seed(cfg.seed + 1)
    x_all = torch.from_numpy(np.asarray(recon_train, dtype=np.float32))
    y_all = torch.from_numpy(labels)
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(x_all), generator=shuffler)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = nn.functional.cross_entropy(clf(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise training.TrainingDiverged(f"classifier: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    return clf


@torch.no_grad()
def classify(clf: ReconstructionClassifier, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(np.asarray(images[start : start + batch_size], dtype=np.float32))
        preds.append(clf(x).argmax(dim=-1).numpy())
    return np.concatenate(preds)


def reconstruction_accuracy(clf: ReconstructionClassifier, recon_test: np.ndarray, labels: np.ndarray) -> float:
    return float((classify(clf, recon_test) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# Mutual-information lower bound (held-out Donsker-Varadhan estimate)
# ---------------------------------------------------------------------------

@dataclass
class MIEstimatorConfig:
    hidden_dims: tuple[int, ...] = (128, 128)
    clamp: float = 10.0
    split: float = 0.5
    epochs: int = 200
    learning_rate: float = 1e-3
    seed: int = 0
    eval_permutations: int = 16

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")
        if self.clamp <= 0:
            raise ValueError("clamp must be positive")


@dataclass
class MIEstimate:
    lower_bound_nats: float
    train_curve: list[float] = field(default_factory=list)


class _StatisticsNetwork(nn.Module):
    """T(z_v, z_a) with outputs smoothly bounded to [-L, L]."""

    def __init__(self, in_dim: int, hidden_dims, clamp: float):
        super().__init__()
        layers = []
        prev = in_dim
        for width in hidden_dims:
            layers += [nn.Linear(prev, width), nn.ReLU()]
            prev = width
        layers.append(nn.Linear(prev, 1))
        self.net = nn.Sequential(*layers)
        self.clamp = clamp

    def forward(self, v, a):
        u = self.net(torch.cat([v, a], dim=-1)).squeeze(-1)
        return self.clamp * torch.tanh(u / self.clamp)


def _dv_bound(t_joint: torch.Tensor, t_marginal: torch.Tensor) -> torch.Tensor:
    return t_joint.mean() - (torch.logsumexp(t_marginal, dim=0) - np.log(len(t_marginal)))


def estimate_mi(z_v: np.ndarray, z_a: np.ndarray, cfg: MIEstimatorConfig = MIEstimatorConfig()) -> MIEstimate:
    """Lower bound on I(Z_v; Z_a) in nats.

    The statistics network is trained on one half of the pairs and the
    Donsker-Varadhan bound E_P[T] - ln E_Q[e^T] is reported on the other,
    with Q formed by shuffling z_a within the held-out split. Keeping the
    report split disjoint from training is what makes the value a usable
    lower bound rather than an overfit score.
    """
    z_v = np.asarray(z_v, dtype=np.float32)
    z_a = np.asarray(z_a, dtype=np.float32)
    if z_v.ndim == 1:
        z_v = z_v[:, None]
    if z_a.ndim == 1:
        z_a = z_a[:, None]
    if len(z_v) != len(z_a):
        raise ValueError("z_v and z_a must pair up")
    if len(z_v) < 10:
        raise ValueError("need at least 10 pairs")

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(z_v))
    n_train = int(len(z_v) * cfg.split)
    train_idx, test_idx = perm[:n_train], perm[n_train:]

    torch.manual_seed(cfg.seed)
    net = _StatisticsNetwork(z_v.shape[1] + z_a.shape[1], cfg.hidden_dims, cfg.clamp)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)

    v_tr = torch.from_numpy(z_v[train_idx])
    a_tr = torch.from_numpy(z_a[train_idx])
    curve = []
    for _ in range(cfg.epochs):
        shuffle = torch.from_numpy(rng.permutation(len(a_tr)))
        bound = _dv_bound(net(v_tr, a_tr), net(v_tr, a_tr[shuffle]))
        loss = -bound
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(float(bound.item()))

    with torch.no_grad():
        v_te = torch.from_numpy(z_v[test_idx])
        a_te = torch.from_numpy(z_a[test_idx])
        t_joint = net(v_te, a_te).double()
        t_marg = torch.cat(
            [net(v_te, a_te[torch.from_numpy(rng.permutation(len(a_te)))]) for _ in range(cfg.eval_permutations)]
        ).double()
        bound = _dv_bound(t_joint, t_marg)
    return MIEstimate(lower_bound_nats=float(bound.item()), train_curve=curve)


# ---------------------------------------------------------------------------
# Study construction
# ---------------------------------------------------------------------------

def class_centroids(emb: EmbeddingSet) -> dict[int, np.ndarray]:
    return {int(c): emb.vectors[emb.labels == c].mean(axis=0) for c in np.unique(emb.labels)}


def select_study_classes(emb: EmbeddingSet, k: int = 3) -> list[int]:
    """The k-subset of classes maximizing the minimum pairwise centroid
    distance (exhaustive; ties resolved toward lexicographically smaller
    class-id subsets)."""
    centroids = class_centroids(emb)
    if len(centroids) < k:
        raise ValueError(f"need at least {k} classes, found {len(centroids)}")
    best_subset, best_score = None, -np.inf
    for subset in itertools.combinations(sorted(centroids), k):
        score = min(
            float(np.linalg.norm(centroids[a] - centroids[b]))
            for a, b in itertools.combinations(subset, 2)
        )
        if score > best_score:
            best_subset, best_score = subset, score
    return list(best_subset)


def sample_near_centroid(emb: EmbeddingSet, class_id: int, count: int, exclude=()) -> list[int]:
    """The `count` members of the class nearest its centroid (Euclidean),
    skipping excluded ids; distance ties break toward the lower index."""
    members = np.flatnonzero(emb.labels == class_id)
    if len(members) == 0:
        raise ValueError(f"class {class_id} has no members")
    centroid = emb.vectors[members].mean(axis=0)
    dists = np.linalg.norm(emb.vectors[members] - centroid, axis=1)
    ranked = members[np.argsort(dists, kind="stable")]
    excluded = set(exclude)
    picked = [int(i) for i in ranked if int(i) not in excluded][:count]
    if len(picked) < count:
        raise ValueError(
            f"class {class_id} has only {len(picked)} selectable members, need {count}"
        )
    return picked


@dataclass
class StudyExample:
    class_id: int
    image_id: int
    image: str
    audio: str
    midi: str


@dataclass
class StudyTrial:
    audio: str
    midi: str
    option_image_ids: list[int]
    option_images: list[str]
    option_classes: list[int]
    correct_index: int


@dataclass
class StudyDefinition:
    selected_classes: list[int]
    examples: list[StudyExample]
    trials: list[StudyTrial]
    seed: int
    digest: str


N_STUDY_CLASSES = 3
N_EXAMPLES_PER_CLASS = 4
N_TRIALS = 20
N_OPTIONS = 3


def validate_study(defn: StudyDefinition) -> list[str]:
    problems = []
    if len(defn.selected_classes) != N_STUDY_CLASSES:
        problems.append(f"expected {N_STUDY_CLASSES} classes")
    for c in defn.selected_classes:
        n = sum(1 for e in defn.examples if e.class_id == c)
        if n != N_EXAMPLES_PER_CLASS:
            problems.append(f"class {c} has {n} examples, expected {N_EXAMPLES_PER_CLASS}")
    if len(defn.trials) != N_TRIALS:
        problems.append(f"expected {N_TRIALS} trials, got {len(defn.trials)}")
    example_ids = {e.image_id for e in defn.examples}
    trial_ids = [i for t in defn.trials for i in t.option_image_ids]
    if example_ids & set(trial_ids):
        problems.append("image ids shared between examples and trials")
    if len(trial_ids) != len(set(trial_ids)):
        problems.append("image ids reused across trial options")
    for i, t in enumerate(defn.trials):
        if len(t.option_image_ids) != N_OPTIONS:
            problems.append(f"trial {i}: expected {N_OPTIONS} options")
        if not 0 <= t.correct_index < N_OPTIONS:
            problems.append(f"trial {i}: correct index out of range")
        if sorted(t.option_classes) != sorted(defn.selected_classes):
            problems.append(f"trial {i}: options must cover each class once")
    return problems


def _study_payload(defn: StudyDefinition) -> dict:
    return {
        "format_version": 1,
        "seed": defn.seed,
        "classes": defn.selected_classes,
        "examples": [
            {"class": e.class_id, "image": e.image, "audio": e.audio, "midi": e.midi}
            for e in defn.examples
        ],
        "trials": [
            {
                "audio": t.audio,
                "midi": t.midi,
                "options": [
                    {"image": img, "class": c}
                    for img, c in zip(t.option_images, t.option_classes)
                ],
            }
            for t in defn.trials
        ],
    }


def study_digest(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


@torch.no_grad()
def _render_melody_tokens(vis, music, pixels: np.ndarray, steps: int) -> np.ndarray:
    x = torch.from_numpy(pixels[None, :])
    q = m.encode_visual(x, vis)
    dists = m.decode_music(q.mean, music, steps)
    return repair_melody(m.sample_melody(dists[0], mode="argmax"))


def build_study(
    syn_ckpt: training.ModelCheckpoint,
    dataset: Dataset,
    seed: int,
    out_dir,
    synth: SynthConfig = SynthConfig(),
) -> StudyDefinition:
    """Construct the listening-study bundle from a trained synesthetic
    checkpoint: pick the 3 most distinct classes, render near-centroid
    example pairs and 20 three-option trials, and write study.json,
    key.json, and all image/audio assets under `out_dir`.

    Deterministic for fixed (checkpoint, dataset, seed): same inputs give a
    byte-identical bundle.
    """
    vis, music = training.load_synesthetic_model(syn_ckpt)
    steps = training._train_config_from(syn_ckpt).melody_steps
    emb = embed_visual(vis, dataset.images, dataset.labels)
    classes = select_study_classes(emb, N_STUDY_CLASSES)

    n_targets = {c: len(range(i, N_TRIALS, N_STUDY_CLASSES)) for i, c in enumerate(classes)}
    example_ids = {c: sample_near_centroid(emb, c, N_EXAMPLES_PER_CLASS) for c in classes}
    used = set().union(*example_ids.values())
    target_ids = {}
    for c in classes:
        target_ids[c] = sample_near_centroid(emb, c, n_targets[c], exclude=used)
        used.update(target_ids[c])
    distractor_ids = {}
    for c in classes:
        distractor_ids[c] = sample_near_centroid(emb, c, N_TRIALS - n_targets[c], exclude=used)
        used.update(distractor_ids[c])

    out_dir = Path(out_dir)
    assets = out_dir / "assets"
    assets.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    def render(image_id: int, stem: str) -> tuple[str, str]:
        tokens = _render_melody_tokens(vis, music, dataset.images[image_id], steps)
        (assets / f"{stem}.wav").write_bytes(tokens_to_wav(tokens, synth))
        (assets / f"{stem}.mid").write_bytes(tokens_to_midi(tokens))
        return f"assets/{stem}.wav", f"assets/{stem}.mid"

    examples = []
    for c in classes:
        for image_id in example_ids[c]:
            stem = f"example-{len(examples):02d}"
            wav, mid = render(image_id, stem)
            save_png_image(dataset.images[image_id], assets / f"{stem}.png")
            examples.append(
                StudyExample(class_id=c, image_id=image_id, image=f"assets/{stem}.png", audio=wav, midi=mid)
            )

    trials = []
    queues = {c: iter(target_ids[c]) for c in classes}
    distractor_queues = {c: iter(distractor_ids[c]) for c in classes}
    for i in range(N_TRIALS):
        target_class = classes[i % N_STUDY_CLASSES]
        options = [(next(queues[target_class]), target_class)] + [
            (next(distractor_queues[c]), c) for c in classes if c != target_class
        ]
        order = rng.permutation(N_OPTIONS)
        options = [options[j] for j in order]
        correct = int(np.flatnonzero(order == 0)[0])
        wav, mid = render(options[correct][0], f"trial-{i:02d}")
        option_images = []
        for j, (image_id, _) in enumerate(options):
            name = f"image-{i * N_OPTIONS + j:02d}.png"
            save_png_image(dataset.images[image_id], assets / name)
            option_images.append(f"assets/{name}")
        trials.append(
            StudyTrial(
                audio=wav,
                midi=mid,
                option_image_ids=[img_id for img_id, _ in options],
                option_images=option_images,
                option_classes=[c for _, c in options],
                correct_index=correct,
            )
        )

    defn = StudyDefinition(selected_classes=classes, examples=examples, trials=trials, seed=seed, digest="")
    problems = validate_study(defn)
    if problems:
        raise RuntimeError("study construction violated its invariants: " + "; ".join(problems))
    payload = _study_payload(defn)
    defn.digest = study_digest(payload)
    payload["digest"] = defn.digest
    (out_dir / "study.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    key = {"digest": defn.digest, "correct": [t.correct_index for t in defn.trials]}
    (out_dir / "key.json").write_text(json.dumps(key, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return defn


# ---------------------------------------------------------------------------
# Agreement statistics
# ---------------------------------------------------------------------------

def fleiss_kappa(counts, n_raters: int | None = None):
    """Fleiss' kappa for an items x categories rating-count matrix.

    Returns None for the degenerate case where expected chance agreement
    is 1 (every rating in a single category), where kappa is undefined.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] < 2:
        raise ValueError("counts must be (items >= 2) x categories")
    row_sums = counts.sum(axis=1)
    if n_raters is None:
        n_raters = int(row_sums[0])
    if not np.all(row_sums == n_raters):
        raise ValueError("every item must be rated by exactly n raters")
    if n_raters < 2:
        raise ValueError("need at least 2 raters")

    p_categories = counts.sum(axis=0) / counts.sum()
    p_expected = float((p_categories**2).sum())
    p_items = ((counts**2).sum(axis=1) - n_raters) / (n_raters * (n_raters - 1))
    p_mean = float(p_items.mean())
    if p_expected >= 1.0:
        return None
    return (p_mean - p_expected) / (1.0 - p_expected)


@dataclass
class AccuracyStats:
    mean: float
    stddev: float  # population standard deviation across evaluators
    per_evaluator: dict[str, float]


def evaluator_accuracy(responses: dict[str, dict[int, int]], key: list[int]) -> AccuracyStats:
    """Per-evaluator accuracy against the answer key, with mean and
    population standard deviation across evaluators."""
    per = {}
    for evaluator, answers in responses.items():
        correct = 0
        for trial, option in answers.items():
            if not 0 <= trial < len(key):
                raise ValueError(f"response to unknown trial {trial}")
            if not 0 <= option < N_OPTIONS:
                raise ValueError(f"invalid option {option} for trial {trial}")
            correct += option == key[trial]
        per[evaluator] = correct / len(answers) if answers else 0.0
    values = np.array(list(per.values()), dtype=np.float64)
    if len(values) == 0:
        return AccuracyStats(mean=float("nan"), stddev=float("nan"), per_evaluator={})
    return AccuracyStats(mean=float(values.mean()), stddev=float(values.std()), per_evaluator=per)
