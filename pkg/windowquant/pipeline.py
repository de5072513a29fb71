"""
WindowQuant -- End-to-end harness.

One run goes:

1. calibrate   -- layer sensitivities from a full-precision pass over a fixed
                  calibration sample (or an explicit override)
2. search      -- bit-width config for the scene (or a baseline config)
3. prefill     -- masked full-precision pass in original order; the first
                  output token is taken here, before anything is reordered
4. quantize    -- reorder + quantize each layer's prefill K/V into a cache
5. decode      -- ``steps`` blocked mixed-precision decode steps

A full-precision oracle run over the same model/scene always accompanies the
run. Decode steps are teacher-forced on the oracle's token sequence so that
attention outputs are comparable step by step; ``generated_tokens`` holds
the greedy choice of the evaluated path at each step.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from windowquant.attention import decode_step, multihead_decode
from windowquant.config import settings
from windowquant.errors import ConfigError, ResourceCapError, ShapeError
from windowquant.kvstore import (
    MemoryReport,
    SegmentedKVCache,
    append_decode_token,
    build_cache,
    memory_report,
    memory_report_from_counts,
)
from windowquant.model import PrefillResult, ToyDecoder, ToyModelSpec, calibrate
from windowquant.numerics import as_matrix, relative_error
from windowquant.quant import BitWidth
from windowquant.scene import SyntheticScene, calibration_input, generate_scene
from windowquant.search import (
    BitWidthConfig,
    LayerSensitivity,
    SIMILARITY_METRICS,
    Thresholds,
    WindowPlan,
    batch_vote,
    compute_thresholds,
    random_config,
    search_config,
    uniform_config,
)

logger = logging.getLogger("windowquant.pipeline")

MODES = ("windowquant", "fp16-oracle", "rtn-int4", "rtn-int2")

UNIFORM_MODE_WIDTHS = {
    "fp16-oracle": BitWidth.FP16,
    "rtn-int4": BitWidth.INT4,
    "rtn-int2": BitWidth.INT2,
}


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PipelineOptions:
    alpha: float = settings.ALPHA
    window_size: int = settings.WINDOW_SIZE
    steps: int = 16
    mode: str = "windowquant"
    fused: bool = True
    reorder: bool = True
    pin_first: bool = True
    search: bool = True
    similarity: str = settings.SIMILARITY
    granularity: str = "group"
    force_width: BitWidth | None = None
    token_cap: int = settings.TOKEN_CAP
    sensitivity: LayerSensitivity | None = None
    config: BitWidthConfig | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.similarity not in SIMILARITY_METRICS:
            raise ConfigError(f"unknown similarity {self.similarity!r}")


@dataclass(frozen=True)
class DecodeTrace:
    generated_tokens: list[int]
    attention_outputs: np.ndarray  # steps × layers × embed_dim


@dataclass(frozen=True)
class ErrorSummary:
    max_relative_error: float
    mean_relative_error: float
    token_match: float

    def to_document(self) -> dict:
        return {
            "max_relative_error": self.max_relative_error,
            "mean_relative_error": self.mean_relative_error,
            "token_match": self.token_match,
        }


@dataclass
class PipelineReport:
    mode: str
    config: BitWidthConfig
    sensitivity: LayerSensitivity
    thresholds: Thresholds
    memory: MemoryReport
    trace: DecodeTrace
    oracle_trace: DecodeTrace
    error: ErrorSummary
    timing: dict[str, float]
    phases: list[str]
    contiguous_layout: bool
    fragments_per_layer: list[int]

    @property
    def generated_tokens(self) -> list[int]:
        return self.trace.generated_tokens

    @property
    def oracle_tokens(self) -> list[int]:
        return self.oracle_trace.generated_tokens

    @property
    def histogram(self) -> list[dict[str, int]]:
        return self.config.histogram()

    def to_document(self) -> dict:
        return {
            "mode": self.mode,
            "config": self.config.to_document(),
            "histogram": self.histogram,
            "sensitivity": list(self.sensitivity.values),
            "thresholds": {"low": list(self.thresholds.low), "high": list(self.thresholds.high)},
            "memory": self.memory.to_document(),
            "error": self.error.to_document(),
            "generated_tokens": self.generated_tokens,
            "oracle_tokens": self.oracle_tokens,
            "timing": self.timing,
            "layout": {
                "contiguous": self.contiguous_layout,
                "hardware_inefficient": not self.contiguous_layout,
                "fragments_per_layer": self.fragments_per_layer,
            },
        }


@dataclass
class BatchReport:
    config: BitWidthConfig
    request_configs: list[BitWidthConfig]
    reports: list[PipelineReport] = field(default_factory=list)

    def to_document(self) -> dict:
        return {
            "voted_config": self.config.to_document(),
            "histogram": self.config.histogram(),
            "request_histograms": [c.histogram() for c in self.request_configs],
            "requests": [r.to_document() for r in self.reports],
        }


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------
def _trace_of(run) -> DecodeTrace:
    return run.trace if isinstance(run, PipelineReport) else run


def oracle_compare(run_a, run_b) -> ErrorSummary:
    """Relative error of ``run_a``'s attention outputs against ``run_b``'s.

    Accepts reports or raw decode traces. Errors are taken per (step, layer)
    output vector; token match is the fraction of equal greedy tokens.
    """
    a, b = _trace_of(run_a), _trace_of(run_b)
    if a.attention_outputs.shape != b.attention_outputs.shape or len(a.generated_tokens) != len(b.generated_tokens):
        raise ShapeError(
            f"cannot compare runs of shapes {a.attention_outputs.shape} and {b.attention_outputs.shape}"
        )
    errors = [
        relative_error(a.attention_outputs[s, layer], b.attention_outputs[s, layer])
        for s in range(a.attention_outputs.shape[0])
        for layer in range(a.attention_outputs.shape[1])
    ]
    matches = sum(x == y for x, y in zip(a.generated_tokens, b.generated_tokens))
    return ErrorSummary(
        max_relative_error=max(errors, default=0.0),
        mean_relative_error=float(np.mean(errors)) if errors else 0.0,
        token_match=matches / len(a.generated_tokens) if a.generated_tokens else 1.0,
    )


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------
def resolve_sensitivity(decoder: ToyDecoder, options: PipelineOptions) -> LayerSensitivity:
    if options.sensitivity is not None:
        if len(options.sensitivity) != decoder.spec.layers:
            raise ConfigError(
                f"sensitivity override has {len(options.sensitivity)} layers, model has {decoder.spec.layers}"
            )
        return options.sensitivity
    return calibrate(decoder, calibration_input(decoder.spec.embed_dim, decoder.spec.seed))


def resolve_config(
    model: ToyModelSpec,
    scene: SyntheticScene,
    visual,
    text,
    sens: LayerSensitivity,
    options: PipelineOptions,
) -> BitWidthConfig:
    """The config a run uses, honouring mode, overrides and ablation flags."""
    plan = WindowPlan.for_tokens(visual.shape[0], options.window_size)
    if options.config is not None:
        if options.config.plan != plan or options.config.num_layers != model.layers:
            raise ConfigError("config override does not match the model/scene shape")
        return options.config
    if options.mode in UNIFORM_MODE_WIDTHS:
        return uniform_config(model.layers, plan, UNIFORM_MODE_WIDTHS[options.mode], options.alpha)
    if options.force_width is not None:
        return uniform_config(model.layers, plan, options.force_width, options.alpha)
    if plan.num_windows == 0:
        logger.warning("Scene has %d visual tokens, fewer than one window of %d; nothing to quantize",
                       visual.shape[0], options.window_size)
        return uniform_config(model.layers, plan, BitWidth.FP16, options.alpha)
    if not options.search:
        return random_config(model.layers, plan, scene.seed, pin_first=options.pin_first, alpha=options.alpha)
    return search_config(
        visual, text, sens, options.window_size, options.alpha,
        pin_first=options.pin_first, metric=options.similarity,
    )


def _oracle_decode(decoder: ToyDecoder, prefill: PrefillResult, steps: int) -> DecodeTrace:
    spec = decoder.spec
    keys = [np.array(k) for k in prefill.keys]
    values = [np.array(v) for v in prefill.values]

    def attend(layer, q, k, v):
        keys[layer] = np.vstack([keys[layer], k])
        values[layer] = np.vstack([values[layer], v])
        return multihead_decode(q, as_matrix(keys[layer]), as_matrix(values[layer]), spec.heads, spec.head_dim)

    tokens = [prefill.first_token]
    outputs = []
    for _ in range(steps):
        result = decoder.step(tokens[-1], attend)
        tokens.append(result.token)
        outputs.append(np.stack(result.attention_outputs))
    return DecodeTrace(tokens, np.stack(outputs))


def _cached_decode(
    decoder: ToyDecoder,
    first_token: int,
    caches: list[SegmentedKVCache],
    forced_tokens: list[int],
    fused: bool,
) -> DecodeTrace:
    def attend(layer, q, k, v):
        append_decode_token(caches[layer], k, v)
        return decode_step(q, caches[layer], fused=fused)

    tokens = [first_token]
    outputs = []
    for step_input in forced_tokens:
        result = decoder.step(step_input, attend)
        tokens.append(result.token)
        outputs.append(np.stack(result.attention_outputs))
    return DecodeTrace(tokens, np.stack(outputs))


def check_token_cap(scene: SyntheticScene, options: PipelineOptions) -> int:
    total = scene.num_visual_tokens + scene.text_tokens + options.steps
    if total > options.token_cap:
        raise ResourceCapError(f"run needs {total} cached tokens, cap is {options.token_cap}")
    return total


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------
def run_pipeline(model: ToyModelSpec, scene: SyntheticScene, options: PipelineOptions | None = None) -> PipelineReport:
    options = options or PipelineOptions()
    check_token_cap(scene, options)
    decoder = ToyDecoder(model)
    timing: dict[str, float] = {}
    phases: list[str] = []

    t0 = time.perf_counter()
    visual, text = generate_scene(scene, model.embed_dim)
    sens = resolve_sensitivity(decoder, options)
    config = resolve_config(model, scene, visual, text, sens, options)
    timing["search"] = time.perf_counter() - t0
    phases.append("search")

    t0 = time.perf_counter()
    prefill = decoder.prefill(as_matrix(np.vstack([visual, text])))
    timing["prefill"] = time.perf_counter() - t0
    phases.append("prefill")

    t0 = time.perf_counter()
    oracle = _oracle_decode(decoder, prefill, options.steps)
    oracle_time = time.perf_counter() - t0

    if options.mode == "fp16-oracle":
        memory = memory_report_from_counts(
            0, 0, prefill.keys[0].shape[0], model.heads, model.head_dim, model.layers
        )
        trace, contiguous, fragments = oracle, True, [1] * model.layers
        timing["quantize"] = 0.0
        timing["decode"] = oracle_time
        phases.append("decode")
    else:
        t0 = time.perf_counter()
        caches = [
            build_cache(
                prefill.keys[i], prefill.values[i], config.layer(i), config.plan,
                model.heads, model.head_dim, reorder=options.reorder, granularity=options.granularity,
            )
            for i in range(model.layers)
        ]
        memory = memory_report(caches)
        timing["quantize"] = time.perf_counter() - t0
        phases.append("quantize")

        t0 = time.perf_counter()
        trace = _cached_decode(decoder, prefill.first_token, caches, oracle.generated_tokens[:-1], options.fused)
        timing["decode"] = time.perf_counter() - t0
        phases.append("decode")
        contiguous = all(c.is_contiguous for c in caches)
        fragments = [c.fragment_count for c in caches]

    timing["decode_tokens_per_sec"] = options.steps / timing["decode"] if timing["decode"] > 0 else 0.0
    report = PipelineReport(
        mode=options.mode,
        config=config,
        sensitivity=sens,
        thresholds=compute_thresholds(sens, options.alpha),
        memory=memory,
        trace=trace,
        oracle_trace=oracle,
        error=oracle_compare(trace, oracle),
        timing=timing,
        phases=phases,
        contiguous_layout=contiguous,
        fragments_per_layer=fragments,
    )
    logger.info(
        "Run %s (seed %d): avg bit-width %.3f, saved %d bytes, max rel err %.3e, token match %.2f",
        options.mode, scene.seed, memory.average_bit_width, memory.bytes_saved,
        report.error.max_relative_error, report.error.token_match,
    )
    return report


def run_batch(model: ToyModelSpec, scenes: list[SyntheticScene], options: PipelineOptions | None = None) -> BatchReport:
    """Run several requests under one batch-voted config."""
    options = options or PipelineOptions()
    if not scenes:
        raise ConfigError("batch needs at least one scene")
    decoder = ToyDecoder(model)
    sens = resolve_sensitivity(decoder, options)
    request_configs = []
    for scene in scenes:
        visual, text = generate_scene(scene, model.embed_dim)
        request_configs.append(resolve_config(model, scene, visual, text, sens, options))
    shared = batch_vote(request_configs)
    shared_options = replace(options, config=shared, sensitivity=sens)
    reports = [run_pipeline(model, scene, shared_options) for scene in scenes]
    return BatchReport(config=shared, request_configs=request_configs, reports=reports)


# ---------------------------------------------------------------------------
# Bench sweep
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class BenchRow:
    frames: int
    batch: int
    window_size: int
    bytes_total: int
    bytes_saved: int
    average_bit_width: float
    tokens_fp16: int
    tokens_int4: int
    tokens_int2: int
    decode_tokens_per_sec: float


def _scene_for(base: SyntheticScene, frames: int, window_size: int, seed: int) -> SyntheticScene:
    probe = replace(base, num_frames=frames, window_size=window_size, relevant_window_ids=(), seed=seed)
    ids = tuple(w for w in base.relevant_window_ids if w < probe.plan.num_windows)
    return replace(probe, relevant_window_ids=ids)


def _bench_cell(model, base, options, frames, batch, window_size) -> BenchRow:
    scenes = [_scene_for(base, frames, window_size, base.seed + r) for r in range(batch)]
    cell_options = replace(options, window_size=window_size)
    result = run_batch(model, scenes, cell_options)
    memories = [r.memory for r in result.reports]
    decode_time = sum(r.timing["decode"] for r in result.reports)
    steps = cell_options.steps * batch
    return BenchRow(
        frames=frames,
        batch=batch,
        window_size=window_size,
        bytes_total=sum(m.bytes_total for m in memories),
        bytes_saved=sum(m.bytes_saved for m in memories),
        average_bit_width=float(np.mean([m.average_bit_width for m in memories])),
        tokens_fp16=sum(m.tokens_fp16 for m in memories),
        tokens_int4=sum(m.tokens_int4 for m in memories),
        tokens_int2=sum(m.tokens_int2 for m in memories),
        decode_tokens_per_sec=steps / decode_time if decode_time > 0 else 0.0,
    )


def run_bench(
    model: ToyModelSpec,
    base: SyntheticScene,
    options: PipelineOptions,
    frames: list[int],
    batches: list[int],
    window_sizes: list[int] | None = None,
    workers: int = settings.BENCH_WORKERS,
) -> list[BenchRow]:
    """Sweep frame counts × batch sizes (× window sizes); rows in sweep order."""
    window_sizes = window_sizes or [options.window_size]
    cells = [(f, b, w) for w in window_sizes for f in frames for b in batches]
    for f, b, w in cells:
        check_token_cap(replace(base, num_frames=f, window_size=w, relevant_window_ids=()), options)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(lambda cell: _bench_cell(model, base, options, *cell), cells))
    logger.info("Bench sweep finished: %d rows", len(rows))
    return rows
