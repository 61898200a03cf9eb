"""Pipeline configuration: defaults, INI file loading, and config hashing.

Defaults encode the reference experimental setup (9 channels, 15 s segments,
360 ms frames, 3-30 Hz band, mixture counts 128/64/7, subspace rank 160,
embedding width 160). Desk-scale runs override sizes through a config file
or command-line flags; flags win over the file.
"""

import configparser
import hashlib
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .dataio import SynthSpec
from .errors import ValidationError


@dataclass
class PipelineConfig:
    # segmentation / channel selection
    segment_duration_s: float = 15.0
    channels: tuple | None = None  # None = all channels; indices into recordings
    # features
    frame_len_ms: float = 360.0
    band_low_hz: float = 3.0
    band_high_hz: float = 30.0
    normalize_features: bool = False
    # ubm-gmm system
    ubm_gmm_mixtures: int = 128
    relevance_factor: float = 16.0
    ubm_max_iters: int = 50
    ubm_tol: float = 1e-4
    # i-vector systems
    baseline_ivector_mixtures: int = 64
    modified_ivector_mixtures: int = 7
    concat_ivector_mixtures: int = 64
    ivector_rank: int = 160
    tmatrix_iters: int = 10
    # x-vector systems
    xvector_hidden1: int = 1024
    xvector_hidden2: int = 512
    embedding_dim: int = 160
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 20
    early_stop_patience: int = 5
    # back-end
    lda_dim: int | None = None  # None = min(embedding dim, subjects - 1)
    enroll_mode: str = "mean"  # "mean" | "pooled" (i-vector systems only)
    # base seed for all stages
    seed: int = 0

    def __post_init__(self):
        if self.channels is not None:
            self.channels = tuple(int(c) for c in self.channels)
        positive = (
            "segment_duration_s", "frame_len_ms", "band_low_hz", "band_high_hz",
            "ubm_gmm_mixtures", "baseline_ivector_mixtures", "modified_ivector_mixtures",
            "concat_ivector_mixtures",
            "ivector_rank", "tmatrix_iters", "xvector_hidden1", "xvector_hidden2",
            "embedding_dim", "batch_size", "epochs",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError(f"config field {name} must be positive")
        if self.enroll_mode not in ("mean", "pooled"):
            raise ValidationError("enroll_mode must be 'mean' or 'pooled'")

    def hash(self) -> str:
        """Structural configuration hash; the seed is provenance, not structure."""
        payload = asdict(self)
        payload.pop("seed")
        payload["channels"] = list(self.channels) if self.channels is not None else None
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_SECTION_OF = {
    "segment_duration_s": "data",
    "channels": "data",
    "frame_len_ms": "features",
    "band_low_hz": "features",
    "band_high_hz": "features",
    "normalize_features": "features",
    "ubm_gmm_mixtures": "ubm",
    "relevance_factor": "ubm",
    "ubm_max_iters": "ubm",
    "ubm_tol": "ubm",
    "baseline_ivector_mixtures": "ivector",
    "concat_ivector_mixtures": "ivector",
    "modified_ivector_mixtures": "ivector",
    "ivector_rank": "ivector",
    "tmatrix_iters": "ivector",
    "xvector_hidden1": "xvector",
    "xvector_hidden2": "xvector",
    "embedding_dim": "xvector",
    "learning_rate": "xvector",
    "adam_beta1": "xvector",
    "adam_beta2": "xvector",
    "adam_epsilon": "xvector",
    "batch_size": "xvector",
    "epochs": "xvector",
    "early_stop_patience": "xvector",
    "lda_dim": "backend",
    "enroll_mode": "backend",
    "seed": "run",
}


def _parse_value(name: str, text: str, kind):
    text = text.strip()
    if name == "channels":
        if text.lower() in ("all", "none", ""):
            return None
        return tuple(int(v) for v in text.split(","))
    if name == "lda_dim":
        return None if text.lower() in ("auto", "none", "") else int(text)
    if kind is bool or isinstance(kind, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"config field {name}: cannot parse boolean {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Read a sectioned key=value config file; overrides win over the file."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ValidationError(f"cannot parse config {path}: {exc}") from exc
        known = {f.name: f for f in fields(PipelineConfig)}
        for section in parser.sections():
            if section == "synth":
                continue
            for key, text in parser.items(section):
                if key not in known:
                    raise ValidationError(f"unknown config key {key!r} in [{section}]")
                if _SECTION_OF[key] != section:
                    raise ValidationError(
                        f"config key {key!r} belongs in [{_SECTION_OF[key]}], found in [{section}]"
                    )
                default = getattr(PipelineConfig, key, None)
                kind = type(default) if default is not None else str
                values[key] = _parse_value(key, text, kind)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return PipelineConfig(**values)


def config_to_text(cfg: PipelineConfig) -> str:
    parser = configparser.ConfigParser()
    for f in fields(PipelineConfig):
        section = _SECTION_OF[f.name]
        if not parser.has_section(section):
            parser.add_section(section)
        value = getattr(cfg, f.name)
        if f.name == "channels":
            text = "all" if value is None else ",".join(str(c) for c in value)
        elif f.name == "lda_dim":
            text = "auto" if value is None else str(value)
        else:
            text = str(value)
        parser.set(section, f.name, text)
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))


def load_synth_spec(path) -> SynthSpec:
    """Read the [synth] section of a config file into a SynthSpec."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from exc
    if not parser.has_section("synth"):
        return SynthSpec()
    values = {}
    valid = {f.name: f.type for f in fields(SynthSpec)}
    for key, text in parser.items("synth"):
        if key not in valid:
            raise ValidationError(f"unknown synth key {key!r}")
        values[key] = int(text) if key.startswith("n_") else float(text)
    return SynthSpec(**values)
