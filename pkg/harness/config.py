import dataclasses
import hashlib
import math
from dataclasses import dataclass, field

import yaml

from harness.errors import ConfigError

SCHEMA_VERSION = 1

LEVELS = ("video", "segment", "frame")
CONTRAST_PAIRS = ("v_a", "v_l", "a_l")
CONTRAST_MODES = ("distribution", "prototype", "feature")
CF_DIMENSIONS = ("inter", "intra", "both")
CF_SPACES = ("continuous", "feature")

# Fields that describe how long or where a run goes, not what it computes
RUN_ONLY_FIELDS = {("optim", "epochs"), ("out_dir",), ("device",)}


@dataclass
class MelConfig:
    """
    Log-Mel frontend settings.

    Attributes:
    - sample_rate: expected audio rate in Hz
    - n_mels: number of Mel bands
    - win_ms: STFT window length in milliseconds
    - hop_ms: STFT hop in milliseconds
    - n_fft: FFT size (the window is zero-padded to it)
    - log_floor: floor applied before the logarithm
    - fmin, fmax: filterbank range in Hz, fmax None means sample_rate / 2
    """
    sample_rate: int = 16000
    n_mels: int = 64
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    log_floor: float = 1e-10
    fmin: float = 0.0
    fmax: float = None

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))


@dataclass
class DataConfig:
    """
    Where clips come from.

    Attributes:
    - source: synthetic or avsbench
    - regime: synthetic regime preset (see entities.synthesis.REGIMES)
    - num_clips: synthetic training clips
    - val_clips: synthetic validation clips
    - num_frames: T, None keeps the regime default
    - resolution: (H, W) fed to the network
    - root: dataset root for source avsbench
    - noise_level: additive noise of synthetic waveforms
    - mel: MelConfig
    """
    source: str = "synthetic"
    regime: str = "s4"
    num_clips: int = 16
    val_clips: int = 8
    num_frames: int = None
    resolution: tuple = (224, 224)
    root: str = None
    noise_level: float = 0.0
    mel: MelConfig = field(default_factory=MelConfig)


@dataclass
class ModelConfig:
    visual_channels: tuple = (32, 64, 128, 256)
    pooled_dim: int = 128
    audio_dim: int = 128
    text_dim: int = 128
    text_tokens: int = 4
    codebook_distractors: int = 20
    codebook_seed: int = 1234
    inversion_steps: int = 200
    inversion_lr: float = 0.05
    query_dim: int = 128
    num_queries: int = 16
    decoder_layers: int = 2
    decoder_heads: int = 8
    text_cue: bool = False


@dataclass
class GranularityConfig:
    """
    Attributes:
    - temperature: attention temperature, None means sqrt(H*W) of each scale
    - segment_window: half or quarter, the window is ceil(T/2) or ceil(T/4)
    - levels: enabled granularity levels, subset of video, segment, frame
    - attended_scales: number of coarsest pyramid scales that get channel attention
    """
    temperature: float = None
    segment_window: str = "half"
    levels: tuple = LEVELS
    attended_scales: int = 2

    def window(self, num_frames:int) -> int:
        match self.segment_window:
            case "half":
                return math.ceil(num_frames / 2)
            case "quarter":
                return math.ceil(num_frames / 4)
            case _:
                raise ConfigError(f"segment_window: {self.segment_window} not yet implemented")


@dataclass
class CounterfactualConfig:
    """
    Attributes:
    - alpha: global mixing ratio
    - ortho_range: [lo, hi) interval of the effective coefficient alpha * m (and alpha * s)
    - intervention_step: diffusion step s^d at which counterfactuals are mixed
    - num_steps: length of the diffusion schedule
    - beta_start, beta_end: linear variance schedule
    - pool_size: k^c, counterfactuals kept per clip
    - candidate_factor: candidates drawn per kept counterfactual
    - pool_refresh_epochs: epochs between pool regenerations
    - lambda_z: weight of the similarity term inside L_ortho
    - lambda_ortho: weight of L_ortho inside L_cf
    - normalize_ortho: compute L_ortho on sequences scaled to unit norm instead of the raw ones
    - denoiser_hidden, denoiser_blocks: denoiser size
    """
    alpha: float = 0.8
    ortho_range: tuple = (0.7, 0.8)
    intervention_step: int = 200
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    pool_size: int = 8
    candidate_factor: int = 4
    pool_refresh_epochs: int = 1
    lambda_z: float = 0.5
    lambda_ortho: float = 1.0
    normalize_ortho: bool = False
    denoiser_hidden: int = 256
    denoiser_blocks: int = 4


@dataclass
class ContrastConfig:
    temperature: float = 1.0
    gamma: float = 0.1
    positive_threshold: float = 0.85
    eps_reg: float = 1e-4
    embed_dim: int = 64


@dataclass
class LossWeights:
    bce: float = 1.0
    dice: float = 1.0
    focal: float = 2.0
    cf: float = 0.1
    cdcl: float = 0.5
    v_a: float = 1.0
    v_l: float = 1.0
    a_l: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 40


@dataclass
class Toggles:
    """
    Ablation switches.

    Attributes:
    - mit: implicit text (codebook inversion, fusion, gating)
    - sc: diffusion counterfactuals, requires mit
    - cdcl: tri-modal contrastive losses
    - cf_dimension: inter (per sample), intra (per token) or both
    - cf_space: continuous (diffusion chain) or feature (mix the clean text, no chain)
    - pair_swap: counterfactuals from swapped (video, audio) pairs instead of diffusion
    - contrast_pairs: enabled contrast pairs among v_a, v_l, a_l
    - contrast_mode: distribution, prototype or feature
    """
    mit: bool = True
    sc: bool = True
    cdcl: bool = True
    cf_dimension: str = "both"
    cf_space: str = "continuous"
    pair_swap: bool = False
    contrast_pairs: tuple = CONTRAST_PAIRS
    contrast_mode: str = "distribution"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    granularity: GranularityConfig = field(default_factory=GranularityConfig)
    counterfactual: CounterfactualConfig = field(default_factory=CounterfactualConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    toggles: Toggles = field(default_factory=Toggles)
    seed: int = 0
    seeds: tuple = (0,)
    device: str = "cpu"
    out_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        """
        Check every cross-field invariant.

        Returns:
        - self, for chaining

        Raises:
        - ConfigError: naming the first violated invariant
        """
        data, toggles, cf = self.data, self.toggles, self.counterfactual

        if data.source not in ("synthetic", "avsbench"):
            raise ConfigError(f"data.source must be synthetic or avsbench, got {data.source}")
        if data.source == "avsbench" and not data.root:
            raise ConfigError("data.root is required for source avsbench")
        if len(data.resolution) != 2 or any(v % 32 or v <= 0 for v in data.resolution):
            raise ConfigError(f"data.resolution must be two positive multiples of 32, got {data.resolution}")
        if data.num_frames is not None and not 1 <= data.num_frames <= 10:
            raise ConfigError(f"data.num_frames must be in [1, 10], got {data.num_frames}")

        if toggles.sc and not toggles.mit:
            raise ConfigError("toggles.sc requires toggles.mit: counterfactuals are generated from the implicit text")
        if toggles.pair_swap and not toggles.mit:
            raise ConfigError("toggles.pair_swap requires toggles.mit")
        if toggles.pair_swap and toggles.sc:
            raise ConfigError("toggles.pair_swap replaces diffusion counterfactuals, disable toggles.sc")
        if toggles.cf_dimension not in CF_DIMENSIONS:
            raise ConfigError(f"toggles.cf_dimension must be one of {CF_DIMENSIONS}, got {toggles.cf_dimension}")
        if toggles.cf_space not in CF_SPACES:
            raise ConfigError(f"toggles.cf_space must be one of {CF_SPACES}, got {toggles.cf_space}")
        if toggles.contrast_mode not in CONTRAST_MODES:
            raise ConfigError(f"toggles.contrast_mode must be one of {CONTRAST_MODES}, got {toggles.contrast_mode}")
        if not set(toggles.contrast_pairs) <= set(CONTRAST_PAIRS):
            raise ConfigError(f"toggles.contrast_pairs must be a subset of {CONTRAST_PAIRS}, got {toggles.contrast_pairs}")

        granularity = self.granularity
        if not granularity.levels or not set(granularity.levels) <= set(LEVELS):
            raise ConfigError(f"granularity.levels must be a nonempty subset of {LEVELS}, got {granularity.levels}")
        if granularity.temperature is not None and granularity.temperature <= 0:
            raise ConfigError(f"granularity.temperature must be > 0, got {granularity.temperature}")
        if granularity.segment_window not in ("half", "quarter"):
            raise ConfigError(f"granularity.segment_window must be half or quarter, got {granularity.segment_window}")
        if not 1 <= granularity.attended_scales <= len(self.model.visual_channels):
            raise ConfigError(f"granularity.attended_scales must be in [1, {len(self.model.visual_channels)}]")

        lo, hi = cf.ortho_range
        if not 0 < lo < hi <= 1:
            raise ConfigError(f"counterfactual.ortho_range must satisfy 0 < lo < hi <= 1, got {cf.ortho_range}")
        if not hi <= cf.alpha <= 1:
            raise ConfigError(f"counterfactual.alpha must lie in [{hi}, 1] so that m and s stay in (0, 1], got {cf.alpha}")
        if not 1 <= cf.intervention_step < cf.num_steps:
            raise ConfigError(f"counterfactual.intervention_step must be in [1, {cf.num_steps}), got {cf.intervention_step}")
        if not 0 < cf.beta_start < cf.beta_end < 1:
            raise ConfigError("counterfactual betas must satisfy 0 < beta_start < beta_end < 1")
        if cf.pool_size < 1 or cf.candidate_factor < 1 or cf.pool_refresh_epochs < 1:
            raise ConfigError("counterfactual.pool_size, candidate_factor and pool_refresh_epochs must be >= 1")

        contrast = self.contrast
        if contrast.temperature <= 0 or contrast.eps_reg <= 0:
            raise ConfigError("contrast.temperature and contrast.eps_reg must be > 0")
        if not -1 <= contrast.positive_threshold <= 1:
            raise ConfigError(f"contrast.positive_threshold must be a cosine in [-1, 1], got {contrast.positive_threshold}")

        weights = dataclasses.asdict(self.weights)
        if any(v < 0 for v in weights.values()):
            raise ConfigError("loss weights must be non-negative")
        if not any(weights[k] > 0 for k in ("bce", "dice", "focal")):
            raise ConfigError("at least one segmentation loss weight must be > 0")

        if self.optim.lr <= 0 or self.optim.batch_size < 1 or self.optim.epochs < 1:
            raise ConfigError("optim.lr must be > 0, optim.batch_size and optim.epochs >= 1")
        if self.model.text_tokens < 1:
            raise ConfigError(f"model.text_tokens must be >= 1, got {self.model.text_tokens}")
        return self

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **_plain(dataclasses.asdict(self))}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def save(self, path:str):
        with open(path, "w") as f:
            f.write(self.to_yaml())

    def config_hash(self) -> str:
        """
        SHA-256 of the canonical YAML dump, run-only fields removed.
        """
        content = self.to_dict()
        for path in RUN_ONLY_FIELDS:
            node = content
            for key in path[:-1]:
                node = node[key]
            node.pop(path[-1], None)
        return hashlib.sha256(yaml.safe_dump(content, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, content:dict) -> "ExperimentConfig":
        content = dict(content or {})
        version = content.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        return _build(cls, content, "").validate()

    @classmethod
    def load(cls, path:str) -> "ExperimentConfig":
        with open(path) as f:
            try:
                content = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e
        if content is not None and not isinstance(content, dict):
            raise ConfigError(f"{path} must hold a mapping at top level")
        return cls.from_dict(content)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(default, value, name:str):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(default, bool) or value is None:
        return value
    if isinstance(default, float) and isinstance(value, (int, str)):
        try:
            return float(value)
        except ValueError as e:
            raise ConfigError(f"{name} must be a number, got {value!r}") from e
    return value


def _build(cls, content:dict, prefix:str):
    """
    Instantiate a config dataclass from a mapping, rejecting unknown keys.
    """
    if not isinstance(content, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be a mapping, got {type(content).__name__}")

    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(content) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")

    defaults = cls()
    kwargs = {}
    for name, value in content.items():
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(default, value, prefix + name)
    return cls(**kwargs)
