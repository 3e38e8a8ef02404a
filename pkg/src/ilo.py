"""
Imitation-learning fast path.

PMM decisions on random instances are recorded as demonstrations, a small
feed-forward network learns to predict the collaboration bits from
(L_k, log10 gamma_k) per user, and at run time its thresholded scores are
repaired to a feasible decision whose powers follow from g_k. Only x is
learned; p is always recovered analytically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from torch import nn

from src.config import settings
from src.errors import DomainError, SolverError, TrainingError, ValidationFailure
from src.instance import Instance, ScenarioConfig, generate_instance, validation_failure
from src.link import PowerCurve
from src.metrics import evaluate_solution
from src.observability import trace_span
from src.pmm import PmmParams, Solution, make_solution, pmm_solve, recover_power, round_and_repair

logger = logging.getLogger(__name__)

DATASET_SCHEMA = "irac-dataset/1"
MODEL_SCHEMA = "irac-model/1"
FOCAL_EPS = 1e-7
HIDDEN_SIZES = (100, 72)
GLOBAL_FEATURES = (
    "log10_power_budget",
    "max_collab",
    "deadline",
    "edge_render_time",
    "log10_bandwidth",
    "log10_volume",
    "log10_noise",
)


class TrainConfig(BaseModel):
    """Optimizer and loss settings for imitation training."""

    model_config = ConfigDict(frozen=True)

    epochs: int = 200
    learning_rate: float = 6e-4
    batch_size: int = 96
    weight_decay: float = 1e-2
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    seed: int = 0
    # None appends global features only when the dataset varies the power budget.
    include_globals: bool | None = None

    @model_validator(mode="after")
    def _check(self) -> TrainConfig:
        violations = []
        if self.epochs < 1:
            violations.append("epochs must be >= 1")
        if not self.learning_rate > 0:
            violations.append("learning_rate must be > 0")
        if self.batch_size < 1:
            violations.append("batch_size must be >= 1")
        if self.weight_decay < 0:
            violations.append("weight_decay must be >= 0")
        if self.focal_gamma < 0:
            violations.append("focal_gamma must be >= 0")
        if not 0 < self.focal_alpha < 1:
            violations.append("focal_alpha must lie in (0, 1)")
        if violations:
            raise ValueError("; ".join(violations))
        return self

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()


class DatasetSample(BaseModel):
    """One PMM demonstration."""

    schema_version: str = DATASET_SCHEMA
    index: int
    seed: int
    instance: Instance
    features: list[float]
    global_features: list[float]
    labels: list[float]
    powers: list[float]
    objective_P1: float
    pmm_status: str

    @model_validator(mode="after")
    def _check(self) -> DatasetSample:
        K = self.instance.num_users
        violations = []
        if len(self.features) != 2 * K:
            violations.append(f"expected {2 * K} per-user features, got {len(self.features)}")
        if len(self.labels) != K or any(v not in (0.0, 1.0) for v in self.labels):
            violations.append("labels must be a binary vector of length K")
        if not all(np.isfinite(self.features)) or not all(np.isfinite(self.global_features)):
            violations.append("features must be finite")
        if violations:
            raise ValueError("; ".join(violations))
        return self


@dataclass
class DatasetBuild:
    samples: list[DatasetSample]
    skipped: list[tuple[int, str]] = field(default_factory=list)


def per_user_features(inst: Instance) -> np.ndarray:
    """(L_k, log10 gamma_k) flattened in user order: user k occupies slots 2k and 2k+1."""
    gamma = inst.gamma
    if np.any(gamma <= 0):
        raise DomainError("channel gains must be > 0 to encode features")
    return np.column_stack([inst.gains, np.log10(gamma)]).reshape(-1)


def global_features(inst: Instance) -> np.ndarray:
    return np.array(
        [
            np.log10(inst.power_budget),
            float(inst.max_collab),
            inst.deadline,
            inst.edge_render_time,
            np.log10(np.mean(inst.bandwidth_array)),
            np.log10(np.mean(inst.volume_array)),
            np.log10(np.mean(inst.noise_array)),
        ]
    )


def feature_encode(inst: Instance, include_globals: bool = False) -> np.ndarray:
    """Raw (un-normalized) network input for one instance."""
    features = per_user_features(inst)
    if include_globals:
        features = np.concatenate([features, global_features(inst)])
    return features


@dataclass(frozen=True)
class FeatureScaler:
    """Per-feature z-score; constant features keep unit scale."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> FeatureScaler:
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean=mean, std=std)

    def normalize(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.mean) / self.std

    def denormalize(self, features) -> np.ndarray:
        return np.asarray(features, dtype=float) * self.std + self.mean


def build_network(input_size: int, num_users: int, seed: int = 0) -> nn.Sequential:
    """affine -> ReLU -> affine -> ReLU -> affine -> logistic, float64, Xavier-uniform weights."""
    sizes = (input_size, *HIDDEN_SIZES, num_users)
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1], dtype=torch.float64))
        layers.append(nn.ReLU() if i < len(sizes) - 2 else nn.Sigmoid())
    network = nn.Sequential(*layers)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for module in network:
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)
    return network


@dataclass
class MlpModel:
    network: nn.Sequential
    scaler: FeatureScaler
    num_users: int
    include_globals: bool = False
    decision_threshold: float = 0.5
    config_digest: str = ""
    _layers: list[tuple[np.ndarray, np.ndarray]] | None = field(
        default=None, init=False, repr=False, compare=False
    )

    @property
    def layer_sizes(self) -> list[int]:
        linear = [m for m in self.network if isinstance(m, nn.Linear)]
        return [linear[0].in_features] + [m.out_features for m in linear]

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    def inference_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W^T, b) numpy views sharing storage with the network; in-place updates stay visible."""
        if self._layers is None:
            self._layers = [
                (m.weight.detach().numpy().T, m.bias.detach().numpy())
                for m in self.network
                if isinstance(m, nn.Linear)
            ]
        return self._layers


def mlp_forward(model: MlpModel, features) -> np.ndarray:
    """
    Per-user collaboration probabilities for normalized features (one row or a batch).

    Runs on numpy views of the weights: a single decision is a few small
    matmuls, where torch dispatch would cost more than the arithmetic.
    """
    batch = np.atleast_2d(np.asarray(features, dtype=float))
    layers = model.inference_layers()
    expected = layers[0][0].shape[0]
    if batch.shape[1] != expected:
        raise DomainError(f"expected {expected} features, got {batch.shape[1]}")
    *hidden, (weight, bias) = layers
    h = batch
    for w, b in hidden:
        h = np.maximum(h @ w + b, 0.0)
    scores = 0.5 * (1.0 + np.tanh(0.5 * (h @ weight + bias)))
    return scores[0] if np.ndim(features) == 1 else scores


def focal_loss(
    scores: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25
) -> torch.Tensor:
    """Mean of -alpha_t (1 - p_t)^gamma log p_t with scores clamped to [eps, 1 - eps]."""
    if scores.shape != labels.shape:
        raise DomainError(f"scores {tuple(scores.shape)} and labels {tuple(labels.shape)} differ")
    scores = scores.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
    labels = labels.to(scores.dtype)
    p_t = labels * scores + (1.0 - labels) * (1.0 - scores)
    alpha_t = labels * alpha + (1.0 - labels) * (1.0 - alpha)
    return torch.mean(-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t))


def _label_instance(
    task: tuple[ScenarioConfig, int, float | None, PmmParams],
) -> tuple[int, DatasetSample | None, str]:
    config, index, power_budget, params = task
    inst = generate_instance(config, index)
    if power_budget is not None:
        inst = inst.with_budget(power_budget)
    try:
        solution = pmm_solve(inst, params)
    except SolverError as exc:
        return index, None, str(exc)
    sample = DatasetSample(
        index=index,
        seed=config.seed,
        instance=inst,
        features=per_user_features(inst).tolist(),
        global_features=global_features(inst).tolist(),
        labels=solution.x,
        powers=solution.p,
        objective_P1=solution.objective_P1,
        pmm_status=solution.status,
    )
    return index, sample, ""


def generate_dataset(
    scenario: ScenarioConfig,
    n_samples: int,
    seed: int,
    *,
    power_sweep: Sequence[float] | None = None,
    params: PmmParams | None = None,
    workers: int | None = None,
) -> DatasetBuild:
    """
    Label n_samples independent instances with PMM. Sample i uses run index i of
    the scenario reseeded with `seed`; with a power sweep its budget cycles
    through the sweep. Failed samples are skipped and reported.
    """
    if n_samples < 1:
        raise ValidationFailure(["n_samples must be >= 1"], subject="dataset request")
    config = scenario.model_copy(update={"seed": seed})
    params = params or PmmParams()
    sweep = list(power_sweep or [])
    tasks = [
        (config, i, sweep[i % len(sweep)] if sweep else None, params) for i in range(n_samples)
    ]
    workers = settings.cap_workers(workers)

    with trace_span("generate_dataset", n=n_samples, workers=workers) as span:
        if workers == 1:
            results = [_label_instance(t) for t in tasks]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_label_instance, tasks, chunksize=8))
        build = DatasetBuild(samples=[])
        for index, sample, reason in results:
            if sample is None:
                logger.warning("sample %d skipped: %s", index, reason)
                build.skipped.append((index, reason))
            else:
                build.samples.append(sample)
        span.annotate(kept=len(build.samples), skipped=len(build.skipped))
    return build


def save_dataset(samples: Sequence[DatasetSample], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for sample in samples:
            fh.write(sample.model_dump_json() + "\n")


def load_dataset(path: str | Path) -> list[DatasetSample]:
    samples = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                samples.append(DatasetSample.model_validate_json(line))
            except ValidationError as exc:
                raise validation_failure(exc, f"{path} line {lineno}") from exc
    return samples


def split_dataset(
    samples: Sequence[DatasetSample], test_fraction: float = 0.5
) -> tuple[list[DatasetSample], list[DatasetSample]]:
    """Deterministic split in file order: the first samples train, the rest test."""
    n_train = len(samples) - int(round(len(samples) * test_fraction))
    return list(samples[:n_train]), list(samples[n_train:])


def _encode(samples: Sequence[DatasetSample], include_globals: bool) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for s in samples:
        row = s.features + (s.global_features if include_globals else [])
        rows.append(row)
    return np.asarray(rows, dtype=float), np.asarray([s.labels for s in samples], dtype=float)


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    train_bit_accuracy: float
    test_loss: float | None = None
    test_bit_accuracy: float | None = None
    test_vector_accuracy: float | None = None


class TrainingHistory(BaseModel):
    epochs: list[EpochRecord] = []

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]


def _accuracy(scores: torch.Tensor, labels: torch.Tensor, threshold: float) -> tuple[float, float]:
    predicted = (scores >= threshold).to(labels.dtype)
    match = predicted == labels
    return float(match.double().mean()), float(match.all(dim=1).double().mean())


def train(
    train_samples: Sequence[DatasetSample],
    cfg: TrainConfig | None = None,
    test_samples: Sequence[DatasetSample] | None = None,
) -> tuple[MlpModel, TrainingHistory]:
    """Mini-batch AdamW on the focal loss; deterministic for a fixed cfg.seed."""
    cfg = cfg or TrainConfig()
    if not train_samples:
        raise ValidationFailure(["training set is empty"], subject="dataset")
    sizes = {s.instance.num_users for s in [*train_samples, *(test_samples or [])]}
    if len(sizes) != 1:
        raise ValidationFailure([f"mixed user counts {sorted(sizes)}"], subject="dataset")
    K = sizes.pop()

    include_globals = cfg.include_globals
    if include_globals is None:
        include_globals = len({s.instance.power_budget for s in train_samples}) > 1

    raw_train, y_train = _encode(train_samples, include_globals)
    scaler = FeatureScaler.fit(raw_train)
    x_train = torch.from_numpy(scaler.normalize(raw_train))
    labels_train = torch.from_numpy(y_train)
    x_test = labels_test = None
    if test_samples:
        raw_test, y_test = _encode(test_samples, include_globals)
        x_test = torch.from_numpy(scaler.normalize(raw_test))
        labels_test = torch.from_numpy(y_test)

    network = build_network(x_train.shape[1], K, seed=cfg.seed)
    model = MlpModel(
        network=network,
        scaler=scaler,
        num_users=K,
        include_globals=include_globals,
        config_digest=cfg.digest(),
    )
    optimizer = torch.optim.AdamW(
        network.parameters(),
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
    )
    shuffle = torch.Generator().manual_seed(cfg.seed)
    history = TrainingHistory()
    n = x_train.shape[0]

    with trace_span("ilo_train", n=n, K=K, epochs=cfg.epochs):
        for epoch in range(1, cfg.epochs + 1):
            network.train()
            order = torch.randperm(n, generator=shuffle)
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                optimizer.zero_grad()
                loss = focal_loss(
                    network(x_train[batch]), labels_train[batch], cfg.focal_gamma, cfg.focal_alpha
                )
                if not torch.isfinite(loss):
                    raise TrainingError(
                        "focal loss became non-finite; try a smaller learning_rate",
                        diagnostics={"epoch": epoch, "batch_start": start, "lr": cfg.learning_rate},
                    )
                loss.backward()
                optimizer.step()

            network.eval()
            with torch.no_grad():
                scores = network(x_train)
                record = EpochRecord(
                    epoch=epoch,
                    train_loss=float(focal_loss(scores, labels_train, cfg.focal_gamma, cfg.focal_alpha)),
                    train_bit_accuracy=_accuracy(scores, labels_train, model.decision_threshold)[0],
                )
                if x_test is not None:
                    test_scores = network(x_test)
                    bit, vector = _accuracy(test_scores, labels_test, model.decision_threshold)
                    record.test_loss = float(
                        focal_loss(test_scores, labels_test, cfg.focal_gamma, cfg.focal_alpha)
                    )
                    record.test_bit_accuracy = bit
                    record.test_vector_accuracy = vector
            history.epochs.append(record)
            if epoch == 1 or epoch % 10 == 0 or epoch == cfg.epochs:
                logger.info(
                    "epoch %d/%d train_loss=%.5f train_acc=%.4f test_acc=%s",
                    epoch,
                    cfg.epochs,
                    record.train_loss,
                    record.train_bit_accuracy,
                    f"{record.test_bit_accuracy:.4f}" if record.test_bit_accuracy is not None else "-",
                )
    return model, history


def infer(model: MlpModel, inst: Instance) -> Solution:
    """Threshold the network scores, repair to feasibility, recover minimal powers."""
    if inst.num_users != model.num_users:
        raise DomainError(f"model is trained for K={model.num_users}, instance has K={inst.num_users}")
    with trace_span("ilo_infer", K=inst.num_users) as span:
        features = model.scaler.normalize(feature_encode(inst, model.include_globals))
        scores = mlp_forward(model, features)
        curve = PowerCurve.from_instance(inst)
        x = round_and_repair(inst, (scores >= model.decision_threshold).astype(float), curve)
        p = recover_power(inst, x, curve)
    return make_solution(
        inst, x, p, "ilo", wall_time=span.duration_s, meta={"threshold": model.decision_threshold}
    )


class IloEvaluation(BaseModel):
    samples: int
    bit_accuracy: float
    vector_accuracy: float
    mean_objective_ilo: float
    mean_objective_pmm: float
    mean_psnr_ilo: float | None = None
    mean_psnr_pmm: float | None = None
    psnr_gap_db: float | None = None
    infeasible: int
    median_infer_seconds: float | None = None
    median_pmm_seconds: float | None = None
    speedup: float | None = None


def evaluate(
    model: MlpModel,
    samples: Sequence[DatasetSample],
    *,
    timing_samples: int = 0,
    params: PmmParams | None = None,
) -> IloEvaluation:
    """
    Score the model against the PMM labels of `samples`. With timing_samples > 0,
    PMM is re-run on that many instances to compare wall times.
    """
    if not samples:
        raise ValidationFailure(["evaluation set is empty"], subject="dataset")
    bits, vectors, obj_ilo, obj_pmm, psnr_ilo, psnr_pmm, infer_times = [], [], [], [], [], [], []
    infeasible = 0
    for s in samples:
        solution = infer(model, s.instance)
        labels = np.asarray(s.labels)
        x = np.asarray(solution.x)
        bits.append(float(np.mean(x == labels)))
        vectors.append(float(np.array_equal(x, labels)))
        obj_ilo.append(solution.objective_P1)
        obj_pmm.append(s.objective_P1)
        infer_times.append(solution.wall_time)
        infeasible += int(not solution.feasibility.feasible)
        if s.instance.quality is not None:
            psnr_ilo.append(evaluate_solution(s.instance, solution.x, solution.p).mean_psnr)
            psnr_pmm.append(evaluate_solution(s.instance, s.labels, s.powers).mean_psnr)

    report = IloEvaluation(
        samples=len(samples),
        bit_accuracy=float(np.mean(bits)),
        vector_accuracy=float(np.mean(vectors)),
        mean_objective_ilo=float(np.mean(obj_ilo)),
        mean_objective_pmm=float(np.mean(obj_pmm)),
        infeasible=infeasible,
    )
    if psnr_ilo:
        report.mean_psnr_ilo = float(np.mean(psnr_ilo))
        report.mean_psnr_pmm = float(np.mean(psnr_pmm))
        report.psnr_gap_db = report.mean_psnr_pmm - report.mean_psnr_ilo
    if timing_samples > 0:
        subset = samples[:timing_samples]
        pmm_times = [pmm_solve(s.instance, params).wall_time for s in subset]
        report.median_infer_seconds = statistics.median(infer_times[: len(subset)])
        report.median_pmm_seconds = statistics.median(pmm_times)
        if report.median_infer_seconds > 0:
            report.speedup = report.median_pmm_seconds / report.median_infer_seconds
    return report


def _parameters(model: MlpModel) -> list[tuple[str, torch.Tensor]]:
    return list(model.network.state_dict().items())


def save_model(model: MlpModel, path: str | Path) -> None:
    """8-byte little-endian header length, JSON header, float64 little-endian payload."""
    params = _parameters(model)
    header = {
        "schema_version": MODEL_SCHEMA,
        "layer_sizes": model.layer_sizes,
        "num_users": model.num_users,
        "include_globals": model.include_globals,
        "decision_threshold": model.decision_threshold,
        "config_digest": model.config_digest,
        "feature_mean": model.scaler.mean.tolist(),
        "feature_std": model.scaler.std.tolist(),
        "parameters": [{"name": name, "shape": list(t.shape)} for name, t in params],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = np.concatenate([t.detach().numpy().reshape(-1) for _, t in params]).astype("<f8")
    Path(path).write_bytes(len(blob).to_bytes(8, "little") + blob + payload.tobytes())


def load_model(path: str | Path) -> MlpModel:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValidationFailure(["file too short for a model header"], subject=f"model {path}")
    size = int.from_bytes(data[:8], "little")
    try:
        header = json.loads(data[8 : 8 + size])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationFailure([f"unreadable header: {exc}"], subject=f"model {path}") from exc
    if header.get("schema_version") != MODEL_SCHEMA:
        raise ValidationFailure(
            [f"schema_version {header.get('schema_version')!r} is not {MODEL_SCHEMA}"],
            subject=f"model {path}",
        )
    if len(data) < 8 + size or (len(data) - 8 - size) % 8:
        raise ValidationFailure(["truncated payload"], subject=f"model {path}")
    payload = np.frombuffer(data, dtype="<f8", offset=8 + size)
    sizes = header["layer_sizes"]
    if tuple(sizes[1:-1]) != HIDDEN_SIZES:
        raise ValidationFailure(
            [f"hidden layers {sizes[1:-1]} differ from {list(HIDDEN_SIZES)}"], subject=f"model {path}"
        )
    network = build_network(sizes[0], sizes[-1])
    expected = sum(int(np.prod(p["shape"])) for p in header["parameters"])
    if payload.size != expected:
        raise ValidationFailure(
            [f"payload has {payload.size} values, header describes {expected}"],
            subject=f"model {path}",
        )
    state, offset = {}, 0
    for entry in header["parameters"]:
        count = int(np.prod(entry["shape"]))
        values = payload[offset : offset + count].reshape(entry["shape"]).astype(np.float64)
        state[entry["name"]] = torch.from_numpy(values.copy())
        offset += count
    network.load_state_dict(state)
    network.eval()
    return MlpModel(
        network=network,
        scaler=FeatureScaler(
            mean=np.asarray(header["feature_mean"], dtype=float),
            std=np.asarray(header["feature_std"], dtype=float),
        ),
        num_users=header["num_users"],
        include_globals=header["include_globals"],
        decision_threshold=header["decision_threshold"],
        config_digest=header["config_digest"],
    )
