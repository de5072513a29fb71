"""
WindowQuant -- Command-line surface.

    python -m windowquant calibrate [config.json] [flags]
    python -m windowquant search    [config.json] [flags]
    python -m windowquant run       [config.json] [flags]
    python -m windowquant bench     [config.json] [flags]

Configuration resolves as built-in defaults <- environment settings <- the
JSON config document <- command-line flags. Every output document is JSON
with sorted keys and carries ``schema_version``, the resolved config and the
seed. A human-readable summary goes to standard error.

Exit codes: 0 success, 1 config (or other WindowQuant) error, 2 token cap
exceeded.
"""
import argparse
import json
import logging
import pathlib
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from windowquant.config import settings
from windowquant.error_tracking import install_error_tracking
from windowquant.errors import ConfigError, ResourceCapError, WindowQuantError
from windowquant.kvstore import GRANULARITIES
from windowquant.model import ToyDecoder, ToyModelSpec
from windowquant.pipeline import (
    MODES,
    PipelineOptions,
    resolve_config,
    resolve_sensitivity,
    run_batch,
    run_bench,
    run_pipeline,
)
from windowquant.quant import BitWidth
from windowquant.reporting import SCHEMA_VERSION, render_summary, write_document
from windowquant.scene import SyntheticScene, generate_scene
from windowquant.search import SIMILARITY_METRICS, LayerSensitivity, compute_thresholds

logger = logging.getLogger("windowquant.cli")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RESOURCE_CAP = 2

COMMANDS = ("calibrate", "search", "run", "bench")

POSITIVE_INT_FIELDS = (
    "layers", "heads", "head_dim", "vocab", "frames", "tokens_per_frame",
    "text_tokens", "window_size", "steps", "batch", "token_cap",
)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RunConfig:
    # model
    layers: int = 4
    heads: int = 2
    head_dim: int = 8
    vocab: int = 64
    # scene
    frames: int = 16
    tokens_per_frame: int = 16
    text_tokens: int = 8
    relevant_windows: list[int] = field(default_factory=list)
    relevance: float = 0.9
    # search / run
    alpha: float = settings.ALPHA
    window_size: int = settings.WINDOW_SIZE
    steps: int = 16
    mode: str = "windowquant"
    batch: int = 1
    similarity: str = settings.SIMILARITY
    granularity: str = "group"
    force_width: str | None = None
    sensitivity_file: str | None = None
    token_cap: int = settings.TOKEN_CAP
    seed: int = settings.SEED
    # ablation flags
    no_fusion: bool = False
    no_reorder: bool = False
    no_first_pin: bool = False
    no_search: bool = False
    # bench sweep
    bench_frames: list[int] = field(default_factory=lambda: [8, 16, 32])
    bench_batches: list[int] = field(default_factory=lambda: [1, 2])
    bench_window_sizes: list[int] = field(default_factory=list)
    output: str | None = None

    def validate(self) -> "RunConfig":
        for name in POSITIVE_INT_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        for name in ("alpha", "relevance"):
            if not isinstance(getattr(self, name), (int, float)) or isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be a number, got {getattr(self, name)!r}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 < self.relevance <= 1.0:
            raise ConfigError(f"relevance must be in (0, 1], got {self.relevance}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.similarity not in SIMILARITY_METRICS:
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.force_width is not None:
            try:
                BitWidth.from_label(self.force_width)
            except ValueError as e:
                raise ConfigError(str(e)) from e
        for name in ("relevant_windows", "bench_frames", "bench_batches", "bench_window_sizes"):
            if not isinstance(getattr(self, name), list):
                raise ConfigError(f"{name} must be a list of integers, got {getattr(self, name)!r}")
        for name in ("bench_frames", "bench_batches", "bench_window_sizes"):
            if any(not isinstance(v, int) or v < 1 for v in getattr(self, name)):
                raise ConfigError(f"{name} entries must be positive integers")
        if any(not isinstance(w, int) or w < 0 for w in self.relevant_windows):
            raise ConfigError("relevant_windows entries must be nonnegative integers")
        return self

    def to_document(self) -> dict:
        return asdict(self)

    # -- derived specs -----------------------------------------------------
    def model_spec(self) -> ToyModelSpec:
        return ToyModelSpec(
            layers=self.layers, heads=self.heads, head_dim=self.head_dim,
            vocab=self.vocab, seed=self.seed,
        )

    def scene(self, seed: int | None = None, frames: int | None = None) -> SyntheticScene:
        base = SyntheticScene(
            num_frames=frames or self.frames,
            tokens_per_frame=self.tokens_per_frame,
            text_tokens=self.text_tokens,
            window_size=self.window_size,
            seed=self.seed if seed is None else seed,
            relevance=self.relevance,
        )
        ids = tuple(w for w in self.relevant_windows if w < base.plan.num_windows)
        return replace(base, relevant_window_ids=ids)

    def pipeline_options(self) -> PipelineOptions:
        return PipelineOptions(
            alpha=self.alpha,
            window_size=self.window_size,
            steps=self.steps,
            mode=self.mode,
            fused=not self.no_fusion,
            reorder=not self.no_reorder,
            pin_first=not self.no_first_pin,
            search=not self.no_search,
            similarity=self.similarity,
            granularity=self.granularity,
            force_width=BitWidth.from_label(self.force_width) if self.force_width else None,
            token_cap=self.token_cap,
            sensitivity=load_sensitivity(self.sensitivity_file) if self.sensitivity_file else None,
        )


def _read_json(path: str, what: str) -> dict:
    try:
        doc = json.loads(pathlib.Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read {what} {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{what} {path} must hold a JSON object")
    return doc


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig from an optional JSON document plus flag overrides."""
    known = {f.name for f in fields(RunConfig)}
    values: dict = {}
    if path:
        doc = _read_json(path, "config")
        doc.pop("schema_version", None)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(doc)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        config = RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return config.validate()


def load_sensitivity(path: str) -> LayerSensitivity:
    """Read the per-layer sensitivities out of a ``calibrate`` document."""
    doc = _read_json(path, "sensitivity file")
    try:
        values = tuple(float(row["sensitivity"]) for row in doc["layers"])
        return LayerSensitivity(values)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"sensitivity file {path} is malformed: {e}") from e


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def _envelope(config: RunConfig, **body) -> dict:
    return {"schema_version": SCHEMA_VERSION, "config": config.to_document(), "seed": config.seed, **body}


def cmd_calibrate(config: RunConfig) -> dict:
    sens = resolve_sensitivity(ToyDecoder(config.model_spec()), config.pipeline_options())
    thresholds = compute_thresholds(sens, config.alpha)
    layers = [
        {"layer": i, "sensitivity": s, "t_low": lo, "t_high": hi}
        for i, (s, lo, hi) in enumerate(zip(sens.values, thresholds.low, thresholds.high))
    ]
    return _envelope(config, layers=layers)


def cmd_search(config: RunConfig) -> dict:
    spec = config.model_spec()
    scene = config.scene()
    options = config.pipeline_options()
    decoder = ToyDecoder(spec)
    visual, text = generate_scene(scene, spec.embed_dim)
    sens = resolve_sensitivity(decoder, options)
    found = resolve_config(spec, scene, visual, text, sens, options)
    return _envelope(config, bit_width_config=found.to_document(), histogram=found.histogram())


def cmd_run(config: RunConfig) -> dict:
    spec = config.model_spec()
    options = config.pipeline_options()
    if config.batch == 1:
        report = run_pipeline(spec, config.scene(), options)
        return _envelope(config, requests=[report.to_document()])
    scenes = [config.scene(seed=config.seed + r) for r in range(config.batch)]
    batch = run_batch(spec, scenes, options)
    return _envelope(config, **batch.to_document())


def cmd_bench(config: RunConfig) -> dict:
    rows = run_bench(
        config.model_spec(),
        config.scene(),
        config.pipeline_options(),
        frames=config.bench_frames,
        batches=config.bench_batches,
        window_sizes=config.bench_window_sizes or None,
    )
    return _envelope(config, rows=[asdict(r) for r in rows])


HANDLERS = {
    "calibrate": cmd_calibrate,
    "search": cmd_search,
    "run": cmd_run,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="windowquant", description="Window-level mixed-precision KV-cache quantization.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config_path", nargs="?", help="JSON config document")
        p.add_argument("-o", "--output", help="write the JSON document here instead of stdout")
        p.add_argument("--seed", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--window-size", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--similarity", choices=SIMILARITY_METRICS)
        p.add_argument("--granularity", choices=GRANULARITIES)
        p.add_argument("--force-width", choices=[w.label for w in BitWidth])
        p.add_argument("--sensitivity-file")
        p.add_argument("--no-fusion", action="store_true", default=None)
        p.add_argument("--no-reorder", action="store_true", default=None)
        p.add_argument("--no-first-pin", action="store_true", default=None)
        p.add_argument("--no-search", action="store_true", default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "bench":
            p.add_argument("--frames", type=_int_list, dest="bench_frames")
            p.add_argument("--batches", type=_int_list, dest="bench_batches")
            p.add_argument("--window-sizes", type=_int_list, dest="bench_window_sizes")
    return parser


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"windowquant: {e}", file=sys.stderr)
        return EXIT_CONFIG

    configure_logging(args.verbose)
    install_error_tracking()

    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config_path", "verbose")}
    try:
        config = load_config(args.config_path, overrides)
        doc = HANDLERS[args.command](config)
        write_document(doc, config.output)
        sys.stderr.write(render_summary(args.command, doc))
    except ConfigError as e:
        logger.error("Config error: %s", e)
        return EXIT_CONFIG
    except ResourceCapError as e:
        logger.error("Resource cap exceeded: %s", e)
        return EXIT_RESOURCE_CAP
    except WindowQuantError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_CONFIG
    return EXIT_OK
