"""End-to-end orchestration of the three training stages and inference."""

from __future__ import annotations

import copy
import hashlib
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import dataio
from .align import AlignConfig, AlignmentModel, check_compatible, train_alignment
from .dataio import SpotDataset
from .diffcore import (
    load_module_arrays,
    module_arrays,
    read_checkpoint,
    seeded,
    write_checkpoint,
)
from .discriminator import (
    DiscConfig,
    DiscriminatorModel,
    GmmParams,
    ThresholdResult,
    binarize,
    fit_gmm_1d,
    gmm_threshold,
    init_discriminator,
    predict_scores,
    train_discriminator,
)
from .errors import ArgumentError, FormatError, TrainingError
from .fusion import VrbcaConfig, VrbcaModel, embed_dataset, pool_contexts, train_fusion

log = logging.getLogger(__name__)

STAGES = ("align", "fuse", "cls")
ABLATIONS = ("", "bca", "rvae", "cl")
CHECKPOINT = "model.ckpt"
VOCAB_FILE = "genes.txt"
TRAIN_LOG = "training_log.tsv"


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run; defaults are the published hyperparameters."""

    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.1
    tau: float = 0.07
    k: int = 6
    lr: float = 1e-5
    epochs_align: int = 100
    epochs_fuse: int = 50
    epochs_cls: int = 50
    batch_size: int = 128
    dropout: float = 0.2
    heads: int = 8
    d_model: int = 512
    latent_dim: int = 64
    cls_hidden: int = 64
    target_sum: float = 1e4
    n_hvg: int = 3000
    hvg_mode: str = "source-fit"
    gmm_mode: str = "per-dataset"
    allow_missing_genes: bool = True
    ablate: str = ""
    seed: int = 0
    deterministic: bool = True
    precision: int = 32

    def __post_init__(self):
        if self.hvg_mode not in ("source-fit", "per-dataset"):
            raise ArgumentError(f"hvg_mode must be source-fit or per-dataset, got {self.hvg_mode}")
        if self.gmm_mode not in ("per-dataset", "global"):
            raise ArgumentError(f"gmm_mode must be per-dataset or global, got {self.gmm_mode}")
        if self.ablate not in ABLATIONS:
            raise ArgumentError(f"ablate must be one of bca, rvae, cl, got {self.ablate}")
        if self.precision not in (32, 64):
            raise ArgumentError("precision must be 32 or 64")
        # Delegate remaining range checks to the stage configs.
        self.align_config()
        self.vrbca_config()

    @classmethod
    def from_mapping(cls, values) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ArgumentError(f"unknown config key: {key}")
            default = getattr(cls(), key)
            try:
                if isinstance(default, bool):
                    kwargs[key] = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = "" if raw is None else str(raw)
            except ValueError as exc:
                raise ArgumentError(f"config key {key}: cannot parse {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_mapping(dataio.read_kv(path))

    def to_dict(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def fingerprint(self) -> str:
        text = "\n".join(f"{k}={dataio._kv_str(v)}" for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def dtype(self):
        return torch.float64 if self.precision == 64 else torch.float32

    def align_config(self) -> AlignConfig:
        epochs = 0 if self.ablate == "cl" else self.epochs_align
        return AlignConfig(
            proj_dim=self.d_model,
            dropout=self.dropout,
            tau=self.tau,
            alpha=self.alpha,
            epochs=epochs,
            lr=self.lr,
            batch_size=self.batch_size,
        )

    def vrbca_config(self) -> VrbcaConfig:
        return VrbcaConfig(
            k=self.k,
            heads=self.heads,
            d_model=self.d_model,
            latent_dim=self.latent_dim,
            beta=self.beta,
            epochs=self.epochs_fuse,
            lr=self.lr,
            batch_size=self.batch_size,
            ablate_bca=self.ablate == "bca",
            ablate_rvae=self.ablate == "rvae",
        )

    def disc_config(self) -> DiscConfig:
        return DiscConfig(
            hidden=self.cls_hidden,
            gamma=self.gamma,
            epochs=self.epochs_cls,
            lr=self.lr,
            batch_size=self.batch_size,
        )


@dataclass
class TrainedModel:
    cfg: RunConfig
    d_img: int
    d_gene: int
    vocab: tuple[str, ...] | None = None
    align: AlignmentModel | None = None
    vrbca: VrbcaModel | None = None
    disc: DiscriminatorModel | None = None
    log_rows: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def stages(self) -> tuple[str, ...]:
        done = []
        for name, part in zip(STAGES, (self.align, self.vrbca, self.disc)):
            if part is not None:
                done.append(name)
        return tuple(done)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def prepare_sources(datasets: Sequence[SpotDataset], cfg: RunConfig):
    """Normalize sources; returns processed datasets and the gene vocabulary."""
    if cfg.hvg_mode == "per-dataset":
        return [dataio.preprocess_per_dataset(ds, cfg.n_hvg, cfg.target_sum) for ds in datasets], None
    return dataio.preprocess_sources(datasets, cfg.n_hvg, cfg.target_sum)


def prepare_target(ds: SpotDataset, model: TrainedModel) -> SpotDataset:
    cfg = model.cfg
    if cfg.hvg_mode == "per-dataset":
        out = dataio.preprocess_per_dataset(ds, cfg.n_hvg, cfg.target_sum)
    else:
        out = dataio.preprocess_target(ds, model.vocab, cfg.target_sum, cfg.allow_missing_genes)
    if out.n_genes != model.d_gene or out.d_img != model.d_img:
        raise dataio.DimensionError(
            f"{ds.dataset_id}: dims ({out.d_img}, {out.n_genes}) do not match the model "
            f"({model.d_img}, {model.d_gene})"
        )
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def fit(
    datasets: Sequence[SpotDataset],
    cfg: RunConfig = RunConfig(),
    stages: Sequence[str] = STAGES,
    resume: TrainedModel | None = None,
) -> TrainedModel:
    """Run the requested stages in order on raw (unnormalized) source datasets.

    Earlier stages missing from ``stages`` are taken from ``resume``.
    """
    for s in stages:
        if s not in STAGES:
            raise ArgumentError(f"unknown stage {s}")
    fusion_needed = any(s in stages for s in ("fuse", "cls"))
    unlabeled = [ds.dataset_id for ds in datasets if ds.labels is None]
    if unlabeled and fusion_needed:
        raise dataio.ValidationError(f"source dataset {unlabeled[0]} has no labels")
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    processed, vocab = prepare_sources(datasets, cfg)
    d_img, d_gene = check_compatible(processed)
    model = resume or TrainedModel(cfg=cfg, d_img=d_img, d_gene=d_gene, vocab=vocab)
    model.cfg = cfg
    if resume is not None and (resume.d_img, resume.d_gene) != (d_img, d_gene):
        raise dataio.DimensionError("source datasets do not match the resumed checkpoint")
    dtype = cfg.dtype
    seed = cfg.seed

    if "align" in stages:
        model.align = train_alignment(processed, cfg.align_config(), seed=seed, dtype=dtype)
        model.vrbca = model.disc = None
        model.log_rows = [r for r in model.log_rows if r[0] != "align"]
        model.log_rows += [("align", e, v) for e, v in enumerate(model.align.loss_trace)]
    if not fusion_needed:
        return model
    if model.align is None:
        raise TrainingError("the fuse and cls stages need a trained alignment stage")
    contexts = pool_contexts([embed_dataset(model.align, ds, cfg.k) for ds in processed])

    if "fuse" in stages:
        model.vrbca = train_fusion(model.align, processed, cfg.vrbca_config(), seed + 101, contexts)
        model.disc = None
        model.log_rows = [r for r in model.log_rows if r[0] == "align"]
        model.log_rows += [("fuse", e, v) for e, v in enumerate(model.vrbca.loss_trace)]
    if "cls" in stages:
        if model.vrbca is None:
            raise TrainingError("the cls stage needs a trained fusion stage")
        disc = init_discriminator(cfg.latent_dim, cfg.disc_config(), seed + 202, dtype)
        model.vrbca, model.disc = train_discriminator(model.vrbca, disc, contexts, seed + 303)
        model.log_rows = [r for r in model.log_rows if r[0] != "cls"]
        model.log_rows += [("cls", e, v) for e, v in enumerate(model.disc.loss_trace)]
    return model


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@dataclass
class Inference:
    scores: np.ndarray
    gmm: GmmParams
    threshold: ThresholdResult
    calls: np.ndarray


def score_dataset(model: TrainedModel, ds: SpotDataset, preprocessed: bool = False) -> np.ndarray:
    if model.disc is None:
        raise TrainingError("model has no trained classifier stage")
    ds = ds if preprocessed else prepare_target(ds, model)
    contexts = embed_dataset(model.align, ds, min(model.cfg.k, ds.n_spots - 1))
    return predict_scores(model.vrbca, model.disc, contexts)


def threshold_scores(scores) -> tuple[GmmParams, ThresholdResult]:
    gmm = fit_gmm_1d(scores)
    return gmm, gmm_threshold(gmm)


def infer(model: TrainedModel, datasets: Sequence[SpotDataset]) -> list[Inference]:
    """Score datasets and threshold them (per dataset, or pooled in global mode)."""
    all_scores = [score_dataset(model, ds) for ds in datasets]
    if model.cfg.gmm_mode == "global":
        gmm, thr = threshold_scores(np.concatenate(all_scores))
        pairs = [(gmm, thr)] * len(all_scores)
    else:
        pairs = [threshold_scores(s) for s in all_scores]
    return [Inference(s, g, t, binarize(s, t.theta)) for s, (g, t) in zip(all_scores, pairs)]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_model(model: TrainedModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {k: dataio._kv_str(v) for k, v in model.cfg.to_dict().items()}
    meta.update(d_img=model.d_img, d_gene=model.d_gene, stages=",".join(model.stages))
    arrays = {}
    for prefix, part in (("align", model.align), ("vrbca", model.vrbca), ("cls", model.disc)):
        if part is not None:
            arrays.update(module_arrays(prefix, part))
    write_checkpoint(directory / CHECKPOINT, meta, arrays)
    if model.vocab is not None:
        (directory / VOCAB_FILE).write_text("\n".join(model.vocab) + "\n")
    lines = ["stage\tepoch\tloss"] + [f"{s}\t{e}\t{v!r}" for s, e, v in model.log_rows]
    (directory / TRAIN_LOG).write_text("\n".join(lines) + "\n")
    return directory


def load_model(directory) -> TrainedModel:
    directory = Path(directory)
    meta, arrays = read_checkpoint(directory / CHECKPOINT)
    cfg_keys = {f.name for f in fields(RunConfig)}
    cfg = RunConfig.from_mapping({k: v for k, v in meta.items() if k in cfg_keys})
    d_img, d_gene = int(meta["d_img"]), int(meta["d_gene"])
    stages = [s for s in meta.get("stages", "").split(",") if s]
    vocab = None
    if (directory / VOCAB_FILE).is_file():
        vocab = tuple(ln for ln in (directory / VOCAB_FILE).read_text().splitlines() if ln)
    model = TrainedModel(cfg=cfg, d_img=d_img, d_gene=d_gene, vocab=vocab)
    dtype = cfg.dtype
    with seeded(0):
        if "align" in stages:
            model.align = AlignmentModel(d_img, d_gene, cfg.align_config()).to(dtype)
            load_module_arrays("align", model.align, arrays)
            model.align.eval()
        if "fuse" in stages:
            model.vrbca = VrbcaModel(cfg.vrbca_config()).to(dtype)
            load_module_arrays("vrbca", model.vrbca, arrays)
        if "cls" in stages:
            model.disc = DiscriminatorModel(cfg.latent_dim, cfg.disc_config()).to(dtype)
            load_module_arrays("cls", model.disc, arrays)
    log_path = directory / TRAIN_LOG
    if log_path.is_file():
        for line in log_path.read_text().splitlines()[1:]:
            if line:
                s, e, v = line.split("\t")
                model.log_rows.append((s, int(e), float(v)))
    return model


def write_scores(path, ds: SpotDataset, result: Inference) -> None:
    lines = ["spot_index\tx\ty\tscore\tcall\tthreshold_method"]
    for i in range(ds.n_spots):
        x, y = (float(v) for v in ds.coords[i])
        lines.append(
            f"{i}\t{x!r}\t{y!r}\t{float(result.scores[i])!r}\t{int(result.calls[i])}\t{result.threshold.method}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing scores file: {path}")
    rows = path.read_text().splitlines()
    header = rows[0].split("\t") if rows else []
    expected = ["spot_index", "x", "y", "score", "call", "threshold_method"]
    if header != expected:
        raise FormatError(f"{path.name}: unexpected header {header}")
    body = [r.split("\t") for r in rows[1:] if r]
    try:
        if any(len(r) != len(expected) for r in body):
            raise ValueError("wrong column count")
        return {
            "spot_index": np.array([int(r[0]) for r in body], dtype=np.int64),
            "x": np.array([float(r[1]) for r in body]),
            "y": np.array([float(r[2]) for r in body]),
            "score": np.array([float(r[3]) for r in body]),
            "call": np.array([int(r[4]) for r in body], dtype=np.int64),
            "threshold_method": np.array([r[5] for r in body]),
        }
    except ValueError as exc:
        raise FormatError(f"{path.name}: malformed row ({exc})") from None


# ---------------------------------------------------------------------------
# Synthetic transfer benchmark
# ---------------------------------------------------------------------------


@dataclass
class TransferResult:
    auc: float
    ks: float
    scores: np.ndarray
    labels: np.ndarray
    seconds: float = 0.0


def transfer_run(cohort: Sequence[SpotDataset], cfg: RunConfig) -> TransferResult:
    """Train on all but the last dataset, score the held-out last one."""
    from .metrics import auc, ks_distance

    start = time.perf_counter()
    model = fit(cohort[:-1], cfg)
    target = cohort[-1]
    scores = score_dataset(model, target)
    y = target.labels
    ks = ks_distance(scores[y == 1], scores[y == 0])
    return TransferResult(auc(scores, y), ks, scores, y, time.perf_counter() - start)


def _align_key(cfg: RunConfig) -> tuple:
    """Everything the alignment stage depends on; equal keys give identical models."""
    return (cfg.align_config(), cfg.seed, cfg.precision, cfg.deterministic, cfg.n_hvg, cfg.target_sum, cfg.hvg_mode)


def transfer_sweep(cohort: Sequence[SpotDataset], cfgs: Sequence[RunConfig]) -> list[TransferResult]:
    """transfer_run for several configs, training each distinct alignment stage once.

    Later stages draw from their own seeded generators, so resuming from a shared
    alignment stage gives the same model as a full fit.  ``seconds`` charges the
    shared alignment time to the first config that needed it.
    """
    from .metrics import auc, ks_distance

    sources, target = cohort[:-1], cohort[-1]
    aligned: dict[tuple, TrainedModel] = {}
    out = []
    for cfg in cfgs:
        start = time.perf_counter()
        key = _align_key(cfg)
        if key not in aligned:
            aligned[key] = fit(sources, cfg, ("align",))
        model = fit(sources, cfg, ("fuse", "cls"), resume=copy.deepcopy(aligned[key]))
        scores = score_dataset(model, target)
        y = target.labels
        ks = ks_distance(scores[y == 1], scores[y == 0])
        out.append(TransferResult(auc(scores, y), ks, scores, y, time.perf_counter() - start))
    return out
