"""File formats and run configuration.

Datasets are JSON-lines (one sample per line, full float precision, so a
write/read round trip is bit-exact). Checkpoints are a single versioned
JSON file of named parameter tensors plus the model config. Run configs
are flat ``key = value`` text with '#' comments and dotted keys; command
line overrides win over file values.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Mapping, Sequence, get_type_hints

import numpy as np

from .model import ModelConfig, SequenceClassifier
from .synthgen import CausalSpec, DomainSpec, Sample, default_domains, default_spec

CHECKPOINT_FORMAT = "seqmask-checkpoint"
GROUND_TRUTH_FORMAT = "seqmask-ground-truth"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Unknown keys, malformed lines, or unparseable values in a config."""


class DataError(ValueError):
    """Malformed dataset, ground-truth, or checkpoint files."""


# --------------------------------------------------------------------- JSON

def dump_json(payload: dict, path: str | Path) -> None:
    """Canonical JSON writer: sorted keys, trailing newline, full float
    precision, so identical payloads produce byte-identical files."""
    text = json.dumps(payload, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_json(path: str | Path) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise DataError(f"{path}: expected a JSON object at top level")
    return payload


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ------------------------------------------------------------------ dataset

def write_dataset(path: str | Path, samples: Sequence[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "id": s.id,
                "domain": s.domain,
                "label": int(s.label),
                "text": s.text.tolist(),
                "video": s.video.tolist(),
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_dataset(path: str | Path) -> list[Sample]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc

    samples: list[Sample] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            sample = Sample(
                id=str(record["id"]),
                domain=str(record["domain"]),
                label=int(record["label"]),
                text=np.asarray(record["text"], dtype=np.float64),
                video=np.asarray(record["video"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad sample record: {exc}") from exc
        if sample.text.ndim != 2 or sample.video.ndim != 2:
            raise DataError(
                f"{path}:{lineno}: text and video must be 2-d token arrays"
            )
        if sample.label < 0:
            raise DataError(f"{path}:{lineno}: label must be a class index >= 0")
        if samples and (
            sample.text.shape != samples[0].text.shape
            or sample.video.shape != samples[0].video.shape
        ):
            raise DataError(
                f"{path}:{lineno}: shape {sample.text.shape}/{sample.video.shape} "
                f"differs from first sample "
                f"{samples[0].text.shape}/{samples[0].video.shape}"
            )
        samples.append(sample)
    if not samples:
        raise DataError(f"{path}: dataset is empty")
    return samples


def split_by_domain(samples: Sequence[Sample]) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {}
    for s in samples:
        out.setdefault(s.domain, []).append(s)
    return out


def write_ground_truth(
    path: str | Path, spec: CausalSpec, domains: Sequence[DomainSpec]
) -> None:
    from .synthgen import ground_truth_support

    dump_json(
        {
            "format": GROUND_TRUTH_FORMAT,
            "version": FORMAT_VERSION,
            "support": ground_truth_support(spec),
            "label_thresholds": list(spec.label_thresholds),
            "generator": asdict(spec),
            "domains": [asdict(d) for d in domains],
        },
        path,
    )


def read_ground_truth(path: str | Path) -> dict:
    payload = load_json(path)
    if payload.get("format") != GROUND_TRUTH_FORMAT:
        raise DataError(f"{path}: not a ground-truth file")
    return payload


# ------------------------------------------------------------------- config

@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run description: model, generator, domains, replicas.

    ``seeds`` lists replica seeds for multi-seed commands; when empty the
    model config's own seed runs once.
    """

    model: ModelConfig
    spec: CausalSpec
    domains: tuple[DomainSpec, ...]
    seeds: tuple[int, ...] = ()
    out_dir: str = "runs"

    def payload(self) -> dict:
        """JSON-ready echo of every resolved value, embedded in outputs."""
        return {
            "model": asdict(self.model),
            "generator": asdict(self.spec),
            "domains": [asdict(d) for d in self.domains],
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
        }


# Builder arguments for the standard generator layout; structural knobs
# that shape the CausalSpec rather than override one of its fields.
_GENERATOR_KEYS = (
    "d",
    "n_invariant",
    "n_spurious",
    "tokens_text",
    "frames_video",
    "text_weight",
    "video_weight",
)
_SPEC_KEYS = (
    "confounder_scale",
    "invariant_noise",
    "label_noise",
    "spurious_edge",
    "spurious_confounder",
    "spurious_noise",
    "noise_scale",
    "token_jitter",
)
_DOMAIN_BUILDER_KEYS = ("n", "strength", "base_seed")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment; later keys win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value in {raw!r}")
        out[key] = value
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return parse_config_text(text, source=str(path))


def _coerce(key: str, raw: str, typ: type):
    if typ is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from exc


def resolve_run_config(pairs: Mapping[str, str]) -> RunConfig:
    """Build a RunConfig from flat dotted keys, rejecting unknown ones.

    Key groups: ``model.<field>`` (ModelConfig), ``generator.<arg>``
    (standard layout builder), ``spec.<field>`` (CausalSpec scalar
    overrides), ``domains.<arg>`` (standard three-domain builder),
    ``domains.<name>.<field>`` (per-domain overrides), ``seeds``,
    ``out_dir``.
    """
    model_types = get_type_hints(ModelConfig)
    spec_types = get_type_hints(CausalSpec)
    domain_types = get_type_hints(DomainSpec)

    model_kwargs: dict = {}
    generator_kwargs: dict = {}
    spec_overrides: dict = {}
    domain_builder: dict = {}
    domain_overrides: dict[str, dict] = {}
    seeds: tuple[int, ...] = ()
    out_dir = "runs"

    for key, raw in pairs.items():
        head, _, rest = key.partition(".")
        if key == "seeds":
            try:
                seeds = tuple(int(tok) for tok in raw.replace(",", " ").split())
            except ValueError as exc:
                raise ConfigError(f"seeds: expected integers, got {raw!r}") from exc
        elif key == "out_dir":
            out_dir = raw
        elif head == "model":
            if rest not in model_types or rest not in {
                f.name for f in fields(ModelConfig)
            }:
                raise ConfigError(f"unknown model key: model.{rest}")
            model_kwargs[rest] = _coerce(key, raw, model_types[rest])
        elif head == "generator":
            if rest not in _GENERATOR_KEYS:
                raise ConfigError(f"unknown generator key: generator.{rest}")
            typ = float if rest.endswith("weight") else int
            generator_kwargs[rest] = _coerce(key, raw, typ)
        elif head == "spec":
            if rest not in _SPEC_KEYS:
                raise ConfigError(f"unknown spec key: spec.{rest}")
            spec_overrides[rest] = _coerce(key, raw, spec_types[rest])
        elif head == "domains":
            name, _, field_name = rest.partition(".")
            if not field_name:
                if name not in _DOMAIN_BUILDER_KEYS:
                    raise ConfigError(f"unknown domains key: domains.{name}")
                typ = float if name == "strength" else int
                domain_builder[name] = _coerce(key, raw, typ)
            else:
                if field_name not in domain_types or field_name == "name":
                    raise ConfigError(f"unknown domain field: {key}")
                domain_overrides.setdefault(name, {})[field_name] = _coerce(
                    key, raw, domain_types[field_name]
                )
        else:
            raise ConfigError(f"unknown config key: {key}")

    try:
        model = ModelConfig(**model_kwargs)
        spec = default_spec(**generator_kwargs)
        if spec_overrides:
            spec = replace(spec, **spec_overrides)
        domains = default_domains(**domain_builder)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    by_name = {d.name: d for d in domains}
    for name, overrides in domain_overrides.items():
        if name not in by_name:
            raise ConfigError(
                f"domain {name!r} not in {sorted(by_name)}; "
                "override fields as domains.<name>.<field>"
            )
        try:
            by_name[name] = replace(by_name[name], **overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # The generator's token/frame counts and feature dims drive the model's.
    model = replace(
        model,
        d_text=spec.text.d,
        d_video=spec.video.d,
        tokens_text=spec.tokens_text,
        frames_video=spec.frames_video,
    )
    return RunConfig(
        model=model,
        spec=spec,
        domains=tuple(by_name.values()),
        seeds=seeds,
        out_dir=out_dir,
    )


# --------------------------------------------------------------- checkpoint

def save_checkpoint(path: str | Path, model: SequenceClassifier) -> None:
    """Single-file JSON checkpoint: versioned header, named tensors, config.

    Training runs are atomic (no mid-run resume), so the recorded RNG
    state is the family of stream seeds every run derives from the config
    seed; reloading reproduces the identical streams.
    """
    cfg = model.config
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "config": asdict(cfg),
        "rng": {
            "seed": cfg.seed,
            "init_stream": cfg.seed,
            "data_stream": cfg.seed + 1,
            "gumbel_stream": cfg.seed + 2,
            "noise_stream": cfg.seed + 3,
        },
        "parameters": {
            name: {"shape": list(p.data.shape), "data": p.data.ravel().tolist()}
            for name, p in model.named_parameters()
        },
    }
    dump_json(payload, path)


def load_checkpoint(path: str | Path) -> SequenceClassifier:
    payload = load_json(path)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint file")
    if payload.get("version") != FORMAT_VERSION:
        raise DataError(
            f"{path}: checkpoint version {payload.get('version')!r} unsupported "
            f"(expected {FORMAT_VERSION})"
        )
    try:
        config = ModelConfig(**payload["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad embedded config: {exc}") from exc

    model = SequenceClassifier(config)
    params = dict(model.named_parameters())
    stored = payload.get("parameters")
    if not isinstance(stored, dict):
        raise DataError(f"{path}: missing parameters table")
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise DataError(
            f"{path}: parameter names do not match the config's architecture "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, entry in stored.items():
        target = params[name]
        try:
            values = np.asarray(entry["data"], dtype=np.float64)
            shape = tuple(entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad tensor entry for {name!r}: {exc}") from exc
        if values.size != int(np.prod(shape)) or shape != target.data.shape:
            raise DataError(
                f"{path}: tensor {name!r} has shape {shape}, "
                f"expected {target.data.shape}"
            )
        target.data = values.reshape(shape)
    return model


# ------------------------------------------------------------------ reports

def stage_reports_payload(reports: Sequence) -> list[dict]:
    return [asdict(r) for r in reports]

