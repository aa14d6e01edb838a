"""Run orchestration: source pretraining and the round-based adaptation loop.

Each round (a) scores and selects confident target images with the current
model, (b) generates scale-invariant examples with entropy-filtered pseudo
labels, and (c) optimizes the combined objective: source cross-entropy plus
the patch adaptation loss.  Every stochastic choice draws from a stateless
per-step stream, so runs resume and reproduce exactly.
"""

import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import seeding
from .entropy import ThresholdVector, filter_map, self_entropy
from .evaluate import EvalReport, accumulate, miou as miou_report, new_confusion, report_csv, selection_history_csv
from .losses import LossConfig, adaptation_loss, ce_loss
from .model import (
    AdamState,
    ModelParams,
    adam_step,
    backward,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .scale_examples import PatchConfig, make_examples_for_image, save_examples, write_index
from .selection import SelectionConfig, run_selection
from .synth_data import Dataset
from .tensor import argmax_labels, check_label_map, softmax, write_tensor

THREADS_ENV = "LSE_THREADS"
_EVAL_CHUNK = 8


@dataclass
class RunConfig:
    # [data]
    source_manifest: str = ""
    target_manifest: str = ""
    out_dir: str = ""
    # [selection]
    p0: float = 0.1
    dp: float = 0.05
    # [patches]  (0 means: derive from the dataset dims, patch = half image)
    k: int = 4
    patch_h: int = 0
    patch_w: int = 0
    out_h: int = 0
    out_w: int = 0
    # [loss]
    gamma: float = 3.0
    beta: float = 0.1
    focal_masked: bool = False
    reduction: str = "mean"
    # [optim]  (reference setup uses lr 1e-6 with a pretrained deep backbone;
    # the toy net needs 1e-3 to move at all)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # [run]
    rounds: int = 4
    steps_per_round: int = 120
    source_steps: int = 300
    batch_source: int = 2
    batch_target_images: int = 2
    seed: int = 0
    deterministic: bool = True
    threshold_override: Optional[float] = None
    threads: int = 1
    eval_max_images: int = 0  # 0 = evaluate on every labeled image
    label: str = ""

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.batch_source < 1:
            raise ValueError("need at least one source image per step")

    def resolved_label(self) -> str:
        if self.label:
            return self.label
        return "with_fl" if self.beta > 0 else "without_fl"


_TOML_SECTIONS = {
    "data": ("source_manifest", "target_manifest", "out_dir"),
    "selection": ("p0", "dp"),
    "patches": ("k", "patch_h", "patch_w", "out_h", "out_w"),
    "loss": ("gamma", "beta", "focal_masked", "reduction"),
    "optim": ("lr", "beta1", "beta2", "eps"),
    "run": (
        "rounds",
        "steps_per_round",
        "source_steps",
        "batch_source",
        "batch_target_images",
        "seed",
        "deterministic",
        "threshold_override",
        "threads",
        "eval_max_images",
        "label",
    ),
}


def load_config(path) -> RunConfig:
    """RunConfig from a TOML file with [data] [selection] [patches] [loss] [optim] [run]."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    kwargs = {}
    for section, keys in _TOML_SECTIONS.items():
        body = doc.get(section, {})
        for key, value in body.items():
            if key not in keys:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = value
    return RunConfig(**kwargs)


def worker_count(requested: int) -> int:
    """Requested workers capped by the LSE_THREADS environment variable."""
    cap = os.environ.get(THREADS_ENV)
    n = max(1, requested)
    if cap:
        n = min(n, max(1, int(cap)))
    return n


@dataclass
class RoundState:
    round_index: int
    portion: float
    thresholds: ThresholdVector
    selected: list
    checkpoint_path: str
    metrics: dict = field(default_factory=dict)


class Run:
    """Owns the model, optimizer, datasets and artifact directory of one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        self.source = Dataset(cfg.source_manifest, with_labels=True)
        if self.source.domain != "source":
            raise ValueError(f"source manifest is tagged {self.source.domain!r}")
        if not self.source.has_labels:
            raise ValueError("source manifest carries no labels")
        # adaptation must be physically unable to read target ground truth
        self.target = Dataset(cfg.target_manifest, with_labels=False)
        if self.target.domain != "target":
            raise ValueError(f"target manifest is tagged {self.target.domain!r}")

        h, w = self.source.image_dims()
        self.patch_cfg = PatchConfig(
            k=cfg.k,
            patch_h=cfg.patch_h or h // 2,
            patch_w=cfg.patch_w or w // 2,
            out_h=cfg.out_h or h,
            out_w=cfg.out_w or w,
            seed=cfg.seed,
        )
        self.loss_cfg = LossConfig(
            gamma=cfg.gamma, beta=cfg.beta, focal_masked=cfg.focal_masked, reduction="sum"
        )
        self._scratch: dict = {}
        self._image_cache: dict = {}
        self._label_cache: dict = {}
        self._loss_log = self.out_dir / "loss_log.csv"
        self.num_classes = int(self._infer_num_classes())
        self.params: Optional[ModelParams] = None
        self.adam: Optional[AdamState] = None
        self.global_step = 0
        self.selection_history: list = []
        self.round_states: list = []

    # -- setup ------------------------------------------------------------

    def _infer_num_classes(self) -> int:
        seen = 0
        for image_id in self.source.ids:
            labels = self._cached_labels(image_id)
            valid = labels[labels != 255]
            if valid.size:
                seen = max(seen, int(valid.max()) + 1)
        if seen < 2:
            raise ValueError("could not infer a class count >= 2 from source labels")
        return seen

    def _cached_labels(self, image_id: str) -> np.ndarray:
        labels = self._label_cache.get(image_id)
        if labels is None:
            labels = self.source.load_labels(image_id)
            check_label_map(labels, 256)  # shape/dtype; class range checked after inference
            self._label_cache[image_id] = labels
        return labels

    def init_model(self) -> None:
        rng = seeding.stream(self.cfg.seed, "init")
        self.params = init_params(self.num_classes, rng)
        self.adam = AdamState.for_params(
            self.params,
            lr=self.cfg.lr,
            beta1=self.cfg.beta1,
            beta2=self.cfg.beta2,
            eps=self.cfg.eps,
        )
        self.global_step = 0

    def _cached_image(self, dataset: Dataset, image_id: str) -> np.ndarray:
        key = (dataset.domain, image_id)
        img = self._image_cache.get(key)
        if img is None:
            img = dataset.load_image(image_id)
            self._image_cache[key] = img
        return img

    # -- prediction helpers -------------------------------------------------

    def predict_logits_batch(self, images: np.ndarray) -> np.ndarray:
        logits, _ = forward_batch(self.params, images)
        return logits

    def predict(self, image: np.ndarray) -> np.ndarray:
        logits = self.predict_logits_batch(image[None])[0]
        return softmax(logits)

    def _predict_many(self, dataset: Dataset, ids) -> dict:
        """ProbVolume per image id, computed in fixed-size batches."""
        chunks = [ids[i : i + _EVAL_CHUNK] for i in range(0, len(ids), _EVAL_CHUNK)]

        def run_chunk(chunk):
            batch = np.stack([self._cached_image(dataset, i) for i in chunk])
            logits, _ = forward_batch(self.params, batch)
            return [softmax(logits[j]) for j in range(len(chunk))]

        out = {}
        n_workers = 1 if self.cfg.deterministic else worker_count(self.cfg.threads)
        if n_workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                results = list(pool.map(run_chunk, chunks))
        else:
            results = [run_chunk(c) for c in chunks]
        for chunk, vols in zip(chunks, results):
            for image_id, vol in zip(chunk, vols):
                out[image_id] = vol
        return out

    # -- evaluation ---------------------------------------------------------

    def evaluate_domain(self, manifest_path, max_images: int = 0) -> EvalReport:
        dataset = Dataset(manifest_path, with_labels=True)
        ids = dataset.ids
        cap = max_images or self.cfg.eval_max_images
        if cap:
            ids = ids[:cap]
        cm = new_confusion(self.num_classes)
        for i in range(0, len(ids), _EVAL_CHUNK):
            chunk = ids[i : i + _EVAL_CHUNK]
            batch = np.stack([self._cached_image(dataset, j) for j in chunk])
            logits, _ = forward_batch(self.params, batch)
            for j, image_id in enumerate(chunk):
                gt = dataset.load_labels(image_id)
                accumulate(cm, argmax_labels(softmax(logits[j])), gt)
        return miou_report(cm, image_count=len(ids))

    # -- training steps -------------------------------------------------------

    def _log_loss(self, round_index, step, loss_src, loss_ce, loss_fl, total) -> None:
        new = not self._loss_log.exists()
        with open(self._loss_log, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(["round", "step", "loss_src", "loss_ce", "loss_fl", "total"])
            writer.writerow(
                [round_index, step, f"{loss_src:.6f}", f"{loss_ce:.6f}", f"{loss_fl:.6f}", f"{total:.6f}"]
            )

    def _train_step(self, round_index: int, examples_by_id: Optional[dict] = None) -> float:
        cfg = self.cfg
        g = self.global_step

        rng_src = seeding.stream(cfg.seed, "src", g)
        src_idx = rng_src.integers(0, len(self.source.ids), size=cfg.batch_source)
        src_ids = [self.source.ids[int(i)] for i in src_idx]
        src_images = [self._cached_image(self.source, i) for i in src_ids]
        src_labels = [self._cached_labels(i) for i in src_ids]

        patch_examples = []
        if examples_by_id:
            selected = sorted(examples_by_id)
            rng_tgt = seeding.stream(cfg.seed, "tgt", g)
            tgt_idx = rng_tgt.integers(0, len(selected), size=cfg.batch_target_images)
            for i in tgt_idx:
                patch_examples.extend(examples_by_id[selected[int(i)]])

        batch = np.stack(src_images + [ex.image for ex in patch_examples])
        logits, fwd_cache = forward_batch(self.params, batch, scratch=self._scratch)
        n_src = len(src_images)

        grad = np.zeros_like(logits)
        total_count = 0
        src_sum = 0.0
        for i in range(n_src):
            lv = ce_loss(softmax(logits[i]), src_labels[i], reduction="sum")
            grad[i] = lv.grad
            total_count += lv.count
            src_sum += lv.loss

        ce_sum = 0.0
        fl_sum = 0.0
        if patch_examples:
            probs = np.stack([softmax(logits[n_src + j]) for j in range(len(patch_examples))])
            alv = adaptation_loss(patch_examples, probs, self.loss_cfg)
            grad[n_src:] = alv.grad
            total_count += alv.count
            ce_sum = alv.ce_part
            fl_sum = alv.fl_part

        scale = 1.0
        if cfg.reduction == "mean" and total_count > 0:
            scale = 1.0 / total_count
            grad *= np.float32(scale)
        total = (src_sum + ce_sum + cfg.beta * fl_sum) * scale
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite loss at global step {g}")

        grads = backward(fwd_cache, grad, scratch=self._scratch)
        adam_step(self.params, grads, self.adam)
        self.global_step += 1

        step_in_phase = g if round_index < 0 else g - cfg.source_steps - round_index * cfg.steps_per_round
        self._log_loss(round_index, step_in_phase, src_sum * scale, ce_sum * scale, fl_sum * scale, total)
        return total

    # -- phases -----------------------------------------------------------

    def train_source(self) -> Path:
        """Minimize source cross-entropy only; writes source.lsec plus reports."""
        if self.params is None:
            self.init_model()
        self._write_run_json()
        for _ in range(self.cfg.source_steps):
            self._train_step(round_index=-1)
        ckpt = self.out_dir / "source.lsec"
        self._save_checkpoint(ckpt)
        source_report = self.evaluate_domain(self.cfg.source_manifest)
        target_report = self.evaluate_domain(self.cfg.target_manifest)
        (self.out_dir / "source_report.csv").write_text(report_csv(source_report))
        (self.out_dir / "source_target_report.csv").write_text(report_csv(target_report))
        write_tensor(
            self.out_dir / "source_confusion.lst", source_report.confusion.astype(np.float32)
        )
        summary = {
            "source_miou": source_report.miou,
            "target_miou": target_report.miou,
        }
        with open(self.out_dir / "source_metrics.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return ckpt

    def resume_source(self) -> None:
        ckpt = self.out_dir / "source.lsec"
        if not ckpt.exists():
            self.train_source()
            return
        self.params, self.adam, extra = load_checkpoint(ckpt)
        self.global_step = int(extra.get("global_step", self.adam.t if self.adam else 0))

    def adapt_round(self, round_index: int) -> RoundState:
        """One (a) select, (b) generate, (c) optimize round; persists artifacts."""
        cfg = self.cfg
        round_dir = self.out_dir / f"round_{round_index}"
        round_dir.mkdir(parents=True, exist_ok=True)

        prob_cache = self._predict_many(self.target, list(self.target.ids))
        sel_cfg = SelectionConfig(
            p0=cfg.p0, dp=cfg.dp, num_classes=self.num_classes, round_index=round_index
        )
        result = run_selection(
            list(self.target.ids),
            prob_cache.__getitem__,
            sel_cfg,
            threshold_override=cfg.threshold_override,
        )
        if not result.selected:
            raise RuntimeError(f"round {round_index}: selection produced no images")
        result.save(round_dir / "selection.json")
        self.selection_history.append(result)

        examples_dir = round_dir / "examples"
        entries = []
        examples_by_id = {}
        for image_id in result.selected:
            p_full = prob_cache[image_id]
            ent = self_entropy(p_full)
            filt = filter_map(p_full, ent, result.thresholds)
            rng = seeding.stream(cfg.seed, "rects", round_index, image_id)
            examples = make_examples_for_image(
                self._cached_image(self.target, image_id),
                p_full,
                filt,
                self.patch_cfg,
                rng,
                source_id=image_id,
            )
            examples_by_id[image_id] = examples
            entries.extend(save_examples(examples_dir, image_id, examples, cfg.seed))
        write_index(examples_dir, entries)
        del prob_cache

        for _ in range(cfg.steps_per_round):
            self._train_step(round_index, examples_by_id)

        ckpt = round_dir / "checkpoint.lsec"
        self._save_checkpoint(ckpt)
        target_report = self.evaluate_domain(cfg.target_manifest)
        (round_dir / "report.csv").write_text(report_csv(target_report))
        state = RoundState(
            round_index=round_index,
            portion=result.portion,
            thresholds=result.thresholds,
            selected=list(result.selected),
            checkpoint_path=str(ckpt),
            metrics={"target_miou": target_report.miou},
        )
        self.round_states.append(state)
        return state

    def adapt(self) -> list:
        """All configured rounds; resumes (or trains) the source checkpoint first."""
        if self.params is None:
            self.resume_source()
        self._write_run_json()
        for r in range(self.cfg.rounds):
            self.adapt_round(r)
        label = self.cfg.resolved_label()
        (self.out_dir / "selection_history.csv").write_text(
            selection_history_csv({label: self.selection_history})
        )
        with open(self.out_dir / "adapt_metrics.json", "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "rounds": [
                        {"round": st.round_index, **st.metrics} for st in self.round_states
                    ]
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
        return self.round_states

    # -- artifacts ----------------------------------------------------------

    def _save_checkpoint(self, path) -> None:
        save_checkpoint(
            path,
            self.params,
            self.adam,
            extra={"global_step": self.global_step, "label": self.cfg.resolved_label()},
        )

    def _write_run_json(self) -> None:
        doc = {
            "config": asdict(self.cfg),
            "label": self.cfg.resolved_label(),
            "versions": {
                "python": sys.version.split()[0],
                "numpy": np.__version__,
                "scaleadapt": _package_version(),
            },
        }
        with open(self.out_dir / "run.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("scaleadapt")
    except Exception:
        return "unknown"


def train_source(cfg: RunConfig) -> Path:
    return Run(cfg).train_source()


def adapt(cfg: RunConfig) -> list:
    return Run(cfg).adapt()
