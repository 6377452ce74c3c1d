"""Configuration dataclasses and YAML (de)serialization.

Every tunable named in the module design notes lives here so that runs are
fully reproducible from a single config file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigurationError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class ExpertConfig:
    """Trio-Experts feature extraction constants."""

    k_neighbors: int = 16
    alpha0: float = 0.6          # opacity gate center
    sigma_alpha: float = 0.25    # opacity gate width
    sigma_overlap: float = 1.0   # overlap kernel bandwidth
    eps: float = 1e-8
    q_lo: float = 0.02           # normalization quantiles
    q_hi: float = 0.98
    iso_needle_threshold: float = 0.1
    coverage_weight_threshold: float = 0.1


@dataclass
class SbagConfig:
    """Carrier selection: proxy scoring, budget, extension, split."""

    beta: float = 0.5
    quantile: float = 0.3
    kappa0: float = 2.0
    budget_mode: str = "adaptive"        # adaptive | fixed-fraction
    budget_fraction: float = 0.10        # used by fixed-fraction mode
    n_split: int = 2
    sim_threshold: float = 0.9
    max_extra_fraction: float = 0.25
    # Split geometry/opacity rules.  "concentrate"+"none" keeps renders
    # bit-near-identical (the WM child inherits the parent, compensator
    # children start nearly transparent); "equal" with a shrink factor is
    # the symmetric alternative.
    split_opacity_mode: str = "concentrate"   # concentrate | equal
    split_scale_mode: str = "none"            # none | area | volume
    compensator_opacity: float = 1e-3
    # Role of Gaussians that are neither carriers nor split children:
    # "all-vis" folds them into the visual-compensator set, "neutral"
    # freezes them.
    noncarrier_role: str = "all-vis"


@dataclass
class MaskConfig:
    """Channel-group gradient mask bounds (dc, rest, opa, rot, sca)."""

    cap: tuple = (1.0, 0.5, 0.8, 0.3, 0.3)
    floor: tuple = (0.05, 0.0, 0.02, 0.0, 0.0)
    per_point: bool = False


@dataclass
class WaveletConfig:
    levels: int = 2


@dataclass
class CodecConfig:
    """Frozen random-projection decoder and EOT distortion family."""

    seed: int = 1234
    message_bits: int = 32
    decode_resolution: int = 128
    decode_levels: int = 3       # wavelet depth of the decoded LL band
    deflate_cutoff: int = 8      # low-order DCT modes removed; 0 disables
    eot_samples: int = 2
    noise_sigma: float = 0.1
    rotation_range: float = 0.5235987755982988  # pi/6
    scale_factor: float = 0.75
    blur_sigma: float = 0.1
    crop_fraction: float = 0.4
    jpeg_quality: int = 50
    eot_kinds: tuple = ("noise", "rotation", "scaling", "blur", "crop", "jpeg")


@dataclass
class AlignConfig:
    """Closed-form carrier color alignment (margin-constrained embed)."""

    margin: float = 0.2          # required signed logit after alignment
    overlap_ridge: float = 0.1   # penalty discouraging footprint overlap
    footprint_ridge: float = 0.1 # penalty on low-visibility carriers
    rounds: int = 3              # outer relinearization passes
    sh_ridge: float = 1e-8       # regularizer for the view-color fit


@dataclass
class TrainConfig:
    """Decoupled finetuning loop."""

    epochs: int = 4
    seed: int = 0
    eot_enabled: bool = True
    lambda_rec: float = 1.0
    lambda_perceptual: float = 0.2   # (1 - MS-SSIM) weight
    lambda_wav_high: float = 0.1
    lambda_clean: float = 1.0
    lambda_eot: float = 1.0
    lambda_low: float = 0.1
    lr_dc: float = 2.5e-3
    lr_rest: float = 1e-3
    lr_opa: float = 5e-3
    lr_rot: float = 1e-3
    lr_sca: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    log_every: int = 10
    divergence_limit: float = 1e6


@dataclass
class EvalConfig:
    prune_threshold: float = 1e-8
    holdout_fraction: float = 0.2   # eval views = last fraction of the ring
    combined_order: tuple = ("noise", "crop", "jpeg")
    min_bitacc: float = 0.0


@dataclass
class Config:
    experts: ExpertConfig = field(default_factory=ExpertConfig)
    sbag: SbagConfig = field(default_factory=SbagConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    wavelet: WaveletConfig = field(default_factory=WaveletConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "Config":
        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        cfg = cls()
        for section_field in dataclasses.fields(cls):
            section = data.get(section_field.name)
            if section is None:
                continue
            target = getattr(cfg, section_field.name)
            valid = {f.name for f in dataclasses.fields(target)}
            for key, value in section.items():
                if key not in valid:
                    raise ConfigurationError(
                        f"unknown key {section_field.name}.{key}")
                if isinstance(getattr(target, key), tuple):
                    value = tuple(value)
                setattr(target, key, value)
        return cfg
