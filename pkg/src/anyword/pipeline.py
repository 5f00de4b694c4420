"""End-to-end grounding and benchmark orchestration."""
from __future__ import annotations

import logging
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Sequence

import numpy as np

from anyword.cache import AttentionCache, CacheEntry, cache_key
from anyword.config import PipelineConfig
from anyword.datasets import DatasetRecord, scene_sidecar
from anyword.diffusion import (
    AveragedAttentionMap,
    Normalization,
    NoiseSchedule,
    average_attention,
    denoise_collect,
    invert,
    minmax,
    reconstruction_offsets,
)
from anyword.embedopt import EmbeddingSet, LowRankAdapter, init_embeddings, optimize_embeddings
from anyword.errors import AnywordError, EmptyDataset, NoEntityFound
from anyword.evalharness import (
    Assignment,
    EvalPair,
    EvalReport,
    ap50,
    ciou,
    class_miou,
    cross_match,
    giou,
    miou,
    recall50,
    stability_study,
)
from anyword.promptmine import (
    BinaryMask,
    Frame,
    MaskPrompt,
    SkippedEntity,
    build_mask_prompts,
    threshold_mask,
    upscale,
)
from anyword.segmentor import GroundedSegmentation, MockSegmentor, assemble_grounded, segment_scored
from anyword.textgraph import (
    BUILTIN,
    BackendKind,
    ParsedExpression,
    ParserBackend,
    mutate_expression,
    parse_expression,
    parse_labels,
)
from anyword.toy import ToyDenoiser, ToyImageEncoder, ToyTextEncoder

log = logging.getLogger(__name__)


@dataclass
class Backends:
    denoiser: Any
    segmentor: Any
    encoder: Any
    image_encoder: Callable[[np.ndarray], np.ndarray]
    schedule: NoiseSchedule
    parser: ParserBackend = BUILTIN


def build_backends(cfg: PipelineConfig, fields: dict[str, np.ndarray] | None = None) -> Backends:
    """Instantiate the backends named in ``cfg``.

    ``fields`` are the toy denoiser's per-word attention fields, normally
    taken from a scene sidecar.
    """
    if cfg.denoiser == "toy":
        denoiser = ToyDenoiser(fields or {})
    else:
        from anyword.remote import RemoteDenoiser

        denoiser = RemoteDenoiser.connect(cfg.denoiser)
    if cfg.segmentor == "mock":
        segmentor = MockSegmentor(cfg.mock_tolerance)
    else:
        from anyword.remote import RemoteSegmentor

        segmentor = RemoteSegmentor.connect(cfg.segmentor, cfg.segmentor_select)
    if cfg.parser == "builtin":
        parser = BUILTIN
    elif cfg.parser.startswith("llm+"):
        from anyword.remote import llm_transport

        parser = ParserBackend(BackendKind.LLM_PROMPTED, transport=llm_transport(cfg.parser[4:]))
    else:
        raise ValueError(f"unknown parser backend {cfg.parser!r}")
    if cfg.encoder != "toy":
        raise ValueError(f"unknown text encoder {cfg.encoder!r}")
    encoder = ToyTextEncoder()
    if cfg.adapter:
        encoder.install_adapter(LowRankAdapter.load(cfg.adapter))
    latent = getattr(denoiser, "latent_shape", (4, *getattr(denoiser, "attention_resolution", (16, 16))))
    return Backends(denoiser, segmentor, encoder, ToyImageEncoder(tuple(latent)),
                    NoiseSchedule.linear(cfg.schedule_steps), parser)


class _Counting:
    """Counts every call into the wrapped denoiser."""

    def __init__(self, inner):
        self._inner = inner
        self.calls = 0
        self._lock = threading.Lock()
        for name in ("noise", "vjp"):
            fn = getattr(inner, name, None)
            if fn is not None:
                setattr(self, name, self._wrap(fn))

    def _wrap(self, fn):
        def call(*args, **kwargs):
            with self._lock:
                self.calls += 1
            return fn(*args, **kwargs)

        return call

    def predict(self, z_t, t, V):
        with self._lock:
            self.calls += 1
        return self._inner.predict(z_t, t, V)

    def __getattr__(self, name):
        return getattr(self._inner, name)


@dataclass
class Diagnostics:
    timings: dict[str, float] = field(default_factory=dict)
    cache_key: str | None = None
    cache_hit: bool = False
    denoiser_calls: int = 0
    opt_steps: int = 0
    loss_history: list[float] = field(default_factory=list)
    parsed: ParsedExpression | None = None
    embeddings: EmbeddingSet | None = None
    maps: dict[int, AveragedAttentionMap] = field(default_factory=dict)
    prompts: list[MaskPrompt] = field(default_factory=list)
    skipped: list[SkippedEntity] = field(default_factory=list)
    predicate_masks: dict[int, BinaryMask] = field(default_factory=dict)


@contextmanager
def _stage(name: str, timings: dict[str, float]):
    t0 = time.perf_counter()
    try:
        yield
    except Exception as exc:
        if getattr(exc, "stage", None) is None:
            try:
                exc.stage = name
            except AttributeError:
                pass
        raise
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def _denoiser_fingerprint(den) -> str:
    fp = getattr(den, "fingerprint", None)
    return fp() if callable(fp) else type(den).__name__


def run_pipeline(
    image: np.ndarray,
    text: str,
    cfg: PipelineConfig,
    backends: Backends | None = None,
    parsed: ParsedExpression | None = None,
    cache: AttentionCache | None = None,
) -> tuple[GroundedSegmentation, Diagnostics]:
    """Ground every entity of ``text`` in ``image``.

    Stages: parse, embed, optimise (PL), invert, collect attention, mine
    prompts (R1/R2), segment. With the segmentor disabled the upscaled
    thresholded attention masks are returned instead.
    """
    backends = backends or build_backends(cfg)
    diag = Diagnostics()
    T = diag.timings
    image = np.asarray(image, dtype=np.float64)
    image_size = tuple(image.shape[:2])
    den = _Counting(backends.denoiser)

    with _stage("parse", T):
        if parsed is None:
            parsed = parse_expression(text, backends.parser)
        diag.parsed = parsed
    with _stage("embed", T):
        V0 = init_embeddings(parsed, backends.encoder, seed=cfg.seed)
        z0 = backends.image_encoder(image)
    steps = cfg.effective_steps(bool(getattr(backends.encoder, "has_adapter", False)))
    opt = cfg.optimizer
    extra = {
        "optimizer": vars(opt),
        "steps": steps,
        "seed": cfg.seed,
        "denoiser": _denoiser_fingerprint(backends.denoiser),
    }
    key = cache_key(image, parsed.text, V0.fingerprint(), backends.schedule.fingerprint(), extra)
    diag.cache_key = key
    hit = cache.get(key) if cache is not None else None

    if hit is not None:
        diag.cache_hit = True
        V = V0.with_vectors(hit.vectors.copy())
        raw = hit.maps
    else:
        with _stage("optimize", T):
            V = optimize_embeddings(z0, V0, backends.schedule, den, replace(opt, seed=cfg.seed),
                                    steps=steps, history=diag.loss_history)
            diag.opt_steps = steps
        with _stage("invert", T):
            inverted = invert(z0, backends.schedule, V, den)
            offsets = reconstruction_offsets(z0, inverted, backends.schedule, V, den)
        with _stage("attention", T):
            _, stack = denoise_collect(inverted[-1], V, backends.schedule, den, offsets)
            raw = np.stack([average_attention(stack, k, Normalization.RAW).grid for k in range(stack.token_count)])
        if cache is not None:
            cache.put(key, CacheEntry(V.vectors.copy(), raw.copy()))
    diag.embeddings = V
    diag.denoiser_calls = den.calls

    norm = Normalization(cfg.normalization)

    def avg(k: int) -> AveragedAttentionMap:
        grid = minmax(raw[k]) if norm == Normalization.MINMAX else raw[k].copy()
        return AveragedAttentionMap(k, grid, norm)

    diag.maps = {k: avg(k) for k in parsed.concept_indices}

    with _stage("prompts", T):
        rng = np.random.default_rng(cfg.seed)
        prompts = build_mask_prompts(
            parsed, diag.maps, rng, image_size, cfg.threshold,
            use_r1=cfg.use_r1, use_r2=cfg.use_r2, fresh_negatives=cfg.fresh_negatives, skipped=diag.skipped,
        )
        diag.prompts = prompts
        if cfg.segment_predicates:
            for tok in parsed.predicates:
                try:
                    diag.predicate_masks[tok.index] = upscale(threshold_mask(avg(tok.index), cfg.threshold), image_size)
                except AnywordError as exc:
                    log.info("predicate %r has no usable map: %s", tok.surface, exc)

    with _stage("segment", T):
        masks: dict[int, Any] = {}
        for p in prompts:
            if cfg.use_segmentor:
                masks[p.entity_id] = segment_scored(image, p, backends.segmentor)
            else:
                root = parsed.entities[p.entity_id].root.index
                masks[p.entity_id] = upscale(threshold_mask(diag.maps[root], cfg.threshold), image_size)
        result = assemble_grounded(masks, parsed, prompts, diag.skipped)
    return result, diag


# ---------------------------------------------------------------------------
# benchmarking


class Task(str, Enum):
    GROUNDED = "grounded"
    REFERENCE = "reference"
    OPEN_VOCAB = "openvocab"
    STABILITY = "stability"


def default_backends_for(cfg: PipelineConfig) -> Callable[[DatasetRecord], Backends]:
    def make(record: DatasetRecord) -> Backends:
        fields = None
        scene = record.meta.get("scene")
        if scene is not None:
            from anyword.synthetic import SyntheticScene

            fields = SyntheticScene.from_json(scene).field_grids()
        elif not isinstance(record.image, np.ndarray) and scene_sidecar(record.image).exists():
            from anyword.synthetic import fields_from_sidecar

            fields = fields_from_sidecar(record.image)
        return build_backends(cfg, fields)

    return make


@dataclass
class _Outcome:
    assignments: list[Assignment] = field(default_factory=list)
    pairs: list[EvalPair] = field(default_factory=list)
    class_pairs: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)
    caption_scores: dict[tuple[Any, int], float] = field(default_factory=dict)
    expressions: int = 0


def _union(masks: Sequence[np.ndarray], shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        out |= np.asarray(getattr(m, "grid", m), dtype=bool)
    return out


def caption_score(seg: GroundedSegmentation, gts: Sequence[tuple[str, np.ndarray]]) -> float:
    """Mean matched IoU per ground-truth instance; unmatched instances score 0."""
    if not gts:
        return 1.0 if not seg.records else 0.0
    a = cross_match(seg, gts)
    return a.total_iou / len(gts)


def evaluate_record(record: DatasetRecord, cfg: PipelineConfig, task: Task, backends: Backends,
                    cache: AttentionCache | None = None) -> _Outcome:
    image = record.load_image()
    shape = image.shape[:2]
    gts = record.gt_masks()
    out = _Outcome()

    def run(text, parsed=None):
        return run_pipeline(image, text, cfg, backends, parsed=parsed, cache=cache)[0]

    if task == Task.GROUNDED:
        for text in record.expressions:
            out.assignments.append(cross_match(run(text), gts))
            out.expressions += 1
    elif task == Task.REFERENCE:
        target = _union([m for _, m in gts], shape)
        for k, text in enumerate(record.expressions):
            try:
                seg = run(text)
                pred = seg.records[0].mask.grid if seg.records else np.zeros(shape, dtype=bool)
            except NoEntityFound:
                pred = np.zeros(shape, dtype=bool)
            out.pairs.append(EvalPair(pred, target, text, record.image_id, k))
            out.expressions += 1
    elif task == Task.OPEN_VOCAB:
        labels = list(dict.fromkeys(p for p, _ in gts))
        if labels:
            parsed = parse_labels(labels, cfg.open_vocab_template)
            seg = run(parsed.text, parsed)
            for i, lab in enumerate(labels):
                pred = _union([r.mask for r in seg.records if r.entity_id == i], shape)
                gt = _union([m for p, m in gts if p == lab], shape)
                out.class_pairs.append((lab, pred, gt))
            out.expressions += 1
    elif task == Task.STABILITY:
        captions = list(record.expressions)
        if len(captions) == 1:
            rng = np.random.default_rng([cfg.seed, zlib.crc32(str(record.record_id).encode())])
            captions += mutate_expression(captions[0], None, backends.parser, rng)
        for k, text in enumerate(captions):
            out.caption_scores[(record.image_id, k)] = caption_score(run(text), gts)
            out.expressions += 1
    return out


def run_benchmark(
    dataset: Sequence[DatasetRecord],
    cfg: PipelineConfig,
    task: Task | str,
    backends_for: Callable[[DatasetRecord], Backends] | None = None,
    cache: AttentionCache | None = None,
) -> EvalReport:
    """Evaluate ``dataset`` under ``task``; failing records are counted, not fatal."""
    task = Task(task)
    if not dataset:
        raise EmptyDataset("benchmark needs at least one record")
    backends_for = backends_for or default_backends_for(cfg)

    def job(record: DatasetRecord):
        try:
            return record, evaluate_record(record, cfg, task, backends_for(record), cache), None
        except Exception as exc:  # contained per record
            log.warning("record %s failed: %s", record.record_id, exc)
            return record, None, {
                "record_id": record.record_id,
                "stage": getattr(exc, "stage", None),
                "error": f"{type(exc).__name__}: {exc}",
            }

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(job, dataset))
    else:
        results = [job(r) for r in dataset]

    report = EvalReport(task.value, n_records=len(dataset))
    outcomes = [o for _, o, _ in results if o is not None]
    report.failures = [f for _, _, f in results if f is not None]
    report.n_failed = len(report.failures)

    def metric(fn, data):
        try:
            return fn(data)
        except EmptyDataset:
            return None

    if task == Task.GROUNDED:
        a = [x for o in outcomes for x in o.assignments]
        report.ap50, report.miou, report.recall = metric(ap50, a), metric(miou, a), metric(recall50, a)
    elif task == Task.REFERENCE:
        pairs = [p for o in outcomes for p in o.pairs]
        report.ciou, report.giou = metric(ciou, pairs), metric(giou, pairs)
    elif task == Task.OPEN_VOCAB:
        report.miou = metric(class_miou, [p for o in outcomes for p in o.class_pairs])
    else:
        scores = {k: v for o in outcomes for k, v in o.caption_scores.items()}
        report.per_image = stability_study(scores, cfg.stability)
        if scores:
            report.miou = float(np.mean(list(scores.values())))
    return report


def ablation_settings() -> dict[str, dict[str, bool]]:
    """The single-flag ablations next to the full method."""
    return {
        "full": {},
        "no_pl": {"use_pl": False},
        "no_r1": {"use_r1": False},
        "no_r2": {"use_r2": False},
        "no_segmentor": {"use_segmentor": False},
    }
