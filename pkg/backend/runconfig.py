"""
Run configuration: a flat `key = value` file mapped onto a typed dataclass.

Each field carries its provenance in `metadata["source"]`: METHOD for values the
method description fixes, DESIGN for choices made here.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

from dotenv import dotenv_values

from .encoders import ContrastiveConfig
from .errors import ConfigError
from .evalmetrics import MetricConfig
from .genvae import VaeConfig
from .latentdiff import DiffusionConfig

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}
ABLATIONS = ("full", "no_two_stage", "no_alignment", "neither")


def _method(default: Any, doc: str) -> Any:
    return field(default=default, metadata={"source": "METHOD", "doc": doc})


def _design(default: Any, doc: str) -> Any:
    return field(default=default, metadata={"source": "DESIGN", "doc": doc})


@dataclass(frozen=True)
class RunConfig:
    latent_dim: int = _method(24, "latent dimension d")
    denoiser_layers: int = _method(4, "fully connected layers in the denoiser")
    T_train: int = _method(100, "diffusion steps for training")
    T_sample: int = _method(50, "sampling steps for text-guided generation")
    p_drop: float = _method(0.1, "condition dropout probability (set 0.8 to try the alternative reading)")
    alpha_kl: float = _method(0.1, "KL weight in the ELBO")
    T_sample_uncond: int = _method(10, "sampling steps for unconditional generation")
    tau: float = _design(0.1, "contrastive temperature")
    w: float = _design(2.0, "guidance weight")
    lr_align: float = _design(1e-3, "Adam learning rate, alignment stage")
    lr_vae: float = _design(1e-3, "Adam learning rate, VAE stage")
    lr_diffusion: float = _design(1e-3, "Adam learning rate, diffusion stage")
    epochs_align: int = _design(30, "alignment epochs")
    epochs_vae: int = _design(50, "VAE epochs")
    epochs_diffusion: int = _design(50, "diffusion epochs")
    batch_size: int = _design(32, "minibatch size, all stages")
    seed: int = _design(0, "root seed; stage seeds are derived from it")
    repair: bool = _design(True, "apply valence repair when decoding")
    schedule: str = _design("cosine", "noise schedule: cosine or linear")
    gin_layers: int = _design(3, "message-passing rounds")
    gin_hidden: int = _design(64, "GIN node state width")
    text_dim: int = _design(32, "token embedding width")
    text_max_len: int = _design(64, "max caption tokens")
    decoder_hidden: int = _design(128, "decoder MLP width")
    decoder_node_dim: int = _design(32, "decoder node state width")
    denoiser_hidden: int = _design(256, "denoiser hidden width")
    time_embed_dim: int = _design(32, "sinusoidal time embedding width")
    symmetric_contrastive: bool = _design(False, "average in the text-to-graph direction")
    diversity_pooling: str = _design("per_prompt", "per_prompt or global")
    samples_per_prompt: int = _method(5, "generations per description in conditional evaluation")
    oversample: int = _design(1, "candidates drawn per kept sample when a reference is given")
    chain_chunk: int = _design(64, "sampling chains per worker task")
    qualified_threshold: float = _method(0.5, "similarity above which a generation is qualified")
    novelty_threshold: float = _method(0.8, "similarity below which a qualified generation is novel")
    val_fraction: float = _design(0.1, "validation share of the dataset")
    test_fraction: float = _design(0.1, "test share of the dataset")
    uncond_mode: str = _design("diffusion", "unconditional sampling: diffusion or prior")

    def __post_init__(self):
        if self.latent_dim < 1 or self.batch_size < 1 or self.chain_chunk < 1:
            raise ConfigError("latent_dim, batch_size and chain_chunk must be positive")
        if self.denoiser_layers < 2:
            raise ConfigError("denoiser needs at least 2 layers")
        if self.oversample < 1 or self.samples_per_prompt < 1:
            raise ConfigError("oversample and samples_per_prompt must be >= 1")
        if self.uncond_mode not in ("diffusion", "prior"):
            raise ConfigError(f"uncond_mode must be diffusion or prior, got '{self.uncond_mode}'")
        if not 0.0 <= self.val_fraction + self.test_fraction < 1.0:
            raise ConfigError("val_fraction + test_fraction must lie in [0, 1)")
        # sub-configs validate their own ranges
        self.contrastive()
        self.vae()
        self.diffusion()
        self.metrics()

    # ------------------------
    # Per-stage views
    # ------------------------
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(
            tau=self.tau, batch_size=self.batch_size, lr=self.lr_align,
            epochs=self.epochs_align, symmetric=self.symmetric_contrastive,
        )

    def vae(self) -> VaeConfig:
        return VaeConfig(alpha_kl=self.alpha_kl, lr=self.lr_vae, epochs=self.epochs_vae, batch_size=self.batch_size)

    def diffusion(self) -> DiffusionConfig:
        return DiffusionConfig(
            T_train=self.T_train, T_sample=self.T_sample, T_sample_uncond=self.T_sample_uncond,
            p_drop=self.p_drop, w=self.w, schedule=self.schedule, lr=self.lr_diffusion,
            epochs=self.epochs_diffusion, batch_size=self.batch_size,
        )

    def metrics(self) -> MetricConfig:
        return MetricConfig(
            qualified_threshold=self.qualified_threshold, novelty_threshold=self.novelty_threshold,
            samples_per_prompt=self.samples_per_prompt, diversity_pooling=self.diversity_pooling,
        )

    # ------------------------
    # (De)serialization
    # ------------------------
    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(k, fields[k].type, v) for k, v in values.items()})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = dotenv_values(dotenv_path=path, interpolate=False)
        missing = [k for k, v in raw.items() if v is None]
        if missing:
            raise ConfigError(f"config keys without a value: {', '.join(missing)}")
        return cls.from_dict(dict(raw))

    def with_overrides(self, **changes: Any) -> "RunConfig":
        return self.from_dict({**self.to_dict(), **{k: v for k, v in changes.items() if v is not None}})

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            text = str(value).lower() if isinstance(value, bool) else str(value)
            lines.append(f"# [{f.metadata['source']}] {f.metadata['doc']}")
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def describe() -> Dict[str, str]:
        """key -> '[SOURCE] doc' for every field."""
        return {f.name: f"[{f.metadata['source']}] {f.metadata['doc']}" for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, kind: Any, value: Any) -> Any:
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind) if isinstance(kind, str) else kind
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(str(value).strip()) if isinstance(value, str) else int(value)
        if kind is float:
            return float(value)
        return str(value).strip()
    except ValueError as e:
        raise ConfigError(f"config key '{key}': {e}") from e
