"""Frozen seeded watermark decoder, view-aggregated decoding, the EOT
distortion family (with differentiable training surrogates), and the
watermark losses.

The decoder is a fixed random projection of the multi-level Haar LL
subband at a fixed decode resolution: rows are drawn from a seeded normal
and orthonormalized, then never touched again.  It is linear in the
image, so its vector-Jacobian product is exact and cheap.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

from gsmark import imageops, wavelet
from gsmark.config import CodecConfig, ConfigurationError
from gsmark.model import ContractViolation

SUPPORTED_BITS = (32, 48, 64)


@dataclass
class Message:
    bits: np.ndarray  # (M,) of {0, 1}

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int64)
        if self.bits.ndim != 1 or not np.isin(self.bits, (0, 1)).all():
            raise ConfigurationError("message must be a flat 0/1 vector")

    def __len__(self):
        return len(self.bits)

    @classmethod
    def random(cls, n_bits: int, rng) -> "Message":
        return cls(rng.integers(0, 2, n_bits))

    @classmethod
    def from_hex(cls, text: str, n_bits: int) -> "Message":
        if len(text) * 4 != n_bits:
            raise ConfigurationError(
                f"hex message {text!r} does not encode {n_bits} bits")
        value = int(text, 16)
        bits = [(value >> (n_bits - 1 - i)) & 1 for i in range(n_bits)]
        return cls(np.array(bits))

    def to_hex(self) -> str:
        value = 0
        for b in self.bits:
            value = (value << 1) | int(b)
        return format(value, f"0{len(self.bits) // 4}x")


@dataclass
class Decoder:
    seed: int
    n_bits: int
    decode_resolution: int
    levels: int
    projection: np.ndarray = field(repr=False)  # (M, K)
    bias: np.ndarray = field(repr=False)        # (M,)

    @property
    def ll_side(self) -> int:
        return self.decode_resolution // (2 ** self.levels)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.projection.tobytes())
        h.update(self.bias.tobytes())
        h.update(np.asarray([self.seed, self.n_bits,
                             self.decode_resolution,
                             self.levels]).tobytes())
        return h.hexdigest()


def _dct_mode_basis(side: int, cutoff: int) -> np.ndarray:
    """Orthonormal basis of per-channel separable DCT modes with both
    frequencies below ``cutoff``, as columns over the flattened LL band."""
    xs = np.arange(side)
    cols = []
    for c in range(3):
        for u in range(cutoff):
            for v in range(cutoff):
                bu = np.cos(np.pi * (xs + 0.5) * u / side)
                bv = np.cos(np.pi * (xs + 0.5) * v / side)
                full = np.zeros((side, side, 3))
                full[:, :, c] = np.outer(bu, bv)
                cols.append(full.ravel())
    q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return q


def build_decoder(seed: int, n_bits: int, decode_resolution: int = 128,
                  levels: int = 3, deflate_cutoff: int = 8) -> Decoder:
    """Seeded, frozen random-projection decoder with orthonormal rows.

    Rows start from a seeded standard normal draw.  Before
    orthonormalization they are projected away from the low-order DCT
    modes of the LL band (``deflate_cutoff`` frequencies per axis, per
    channel; 0 disables).  Natural renders concentrate energy in those
    modes, so deflation keeps unwatermarked content near zero logits and
    lets embedding work at much smaller image perturbations.
    """
    if n_bits not in SUPPORTED_BITS:
        raise ConfigurationError(
            f"message length must be one of {SUPPORTED_BITS}")
    side = decode_resolution // (2 ** levels)
    if decode_resolution % (2 ** levels):
        raise ConfigurationError("decode resolution must divide by 2^levels")
    k = side * side * 3
    if deflate_cutoff < 0 or deflate_cutoff > side:
        raise ConfigurationError("deflate cutoff must be in [0, LL side]")
    n_deflated = 3 * deflate_cutoff * deflate_cutoff
    if n_bits > k - n_deflated:
        raise ConfigurationError("message longer than the deflated LL band")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((k, n_bits))
    if deflate_cutoff:
        basis = _dct_mode_basis(side, deflate_cutoff)
        raw -= basis @ (basis.T @ raw)
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # deterministic sign convention
    return Decoder(seed=int(seed), n_bits=n_bits,
                   decode_resolution=decode_resolution, levels=levels,
                   projection=np.ascontiguousarray(q.T),
                   bias=np.zeros(n_bits))


def decoder_from_config(cfg: CodecConfig) -> Decoder:
    return build_decoder(cfg.seed, cfg.message_bits, cfg.decode_resolution,
                         cfg.decode_levels, cfg.deflate_cutoff)


def _ll_of(image: np.ndarray, decoder: Decoder):
    planes = image.transpose(2, 0, 1)  # (3, H, W)
    pyr = wavelet.dwt2(planes, decoder.levels)
    return pyr.ll, pyr


def decode(decoder: Decoder, image: np.ndarray) -> np.ndarray:
    """Logits for one rendered view."""
    return decode_with_vjp(decoder, image)[0]


def decode_with_vjp(decoder: Decoder, image: np.ndarray):
    """Logits plus the exact adjoint mapping dL/dlogits -> dL/dimage."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    res = decoder.decode_resolution
    resized = imageops.resize_bilinear(image, res, res)
    ll, pyr = _ll_of(resized, decoder)
    logits = decoder.projection @ ll.ravel() + decoder.bias

    def vjp(grad_logits: np.ndarray) -> np.ndarray:
        g_ll = (decoder.projection.T @ grad_logits).reshape(ll.shape)
        gpyr = wavelet.SubbandPyramid(
            levels=pyr.levels,
            details=[tuple(np.zeros_like(b) for b in t)
                     for t in pyr.details],
            ll=g_ll, shapes=list(pyr.shapes))
        g_res = wavelet.dwt2_adjoint(gpyr).transpose(1, 2, 0)
        return imageops.resize_bilinear_adjoint(g_res, h, w)

    return logits, vjp


def aggregate_logits(logit_list) -> np.ndarray:
    """Average logits over visible views (per bit)."""
    if not len(logit_list):
        raise ContractViolation("cannot aggregate an empty logit list")
    return np.mean(np.asarray(logit_list), axis=0)


def bit_accuracy(logits: np.ndarray, message: Message) -> float:
    """Fraction of bits whose decoded sign matches; a zero logit decodes
    as bit 0."""
    logits = np.asarray(logits)
    if len(logits) != len(message):
        raise ContractViolation("logit/message length mismatch")
    decoded = (logits > 0).astype(np.int64)
    return float((decoded == message.bits).mean())


# ---------------------------------------------------------------------------
# Distortion family
# ---------------------------------------------------------------------------

@dataclass
class DistortionSpec:
    kind: str
    mode: str = "eval-exact"   # eval-exact | train-surrogate
    sigma: float = 0.1         # noise / blur std
    angle_range: float = np.pi / 6
    factor: float = 0.75       # scaling
    keep_fraction: float = 0.4  # crop area fraction
    quality: int = 50          # jpeg

    def validate(self) -> None:
        if self.kind not in ("noise", "rotation", "scaling", "blur",
                             "crop", "jpeg"):
            raise ConfigurationError(f"unknown distortion {self.kind!r}")
        if self.kind in ("noise", "blur") and self.sigma < 0:
            raise ConfigurationError("sigma must be >= 0")
        if self.kind == "scaling" and not 0 < self.factor <= 1:
            raise ConfigurationError("scale factor must be in (0, 1]")
        if self.kind == "crop" and not 0 < self.keep_fraction <= 1:
            raise ConfigurationError("keep fraction must be in (0, 1]")
        if self.kind == "jpeg" and not 1 <= self.quality <= 100:
            raise ConfigurationError("jpeg quality must be in [1, 100]")

    @classmethod
    def default_for(cls, kind: str, mode: str = "eval-exact",
                    cfg: CodecConfig | None = None) -> "DistortionSpec":
        cfg = cfg or CodecConfig()
        return cls(kind=kind, mode=mode, sigma=(cfg.blur_sigma
                                                if kind == "blur"
                                                else cfg.noise_sigma),
                   angle_range=cfg.rotation_range, factor=cfg.scale_factor,
                   keep_fraction=cfg.crop_fraction,
                   quality=cfg.jpeg_quality)


def apply_distortion(image: np.ndarray, spec: DistortionSpec,
                     rng) -> np.ndarray:
    """Sample the distortion's free parameters from ``rng`` and apply it."""
    return distort_with_vjp(image, spec, rng)[0]


def distort_with_vjp(image: np.ndarray, spec: DistortionSpec, rng):
    """Distorted image plus the (sub)gradient pullback dL/dout -> dL/din.

    Geometric and filtering distortions are linear, so their pullbacks are
    exact adjoints; clipping uses the interior indicator; the JPEG
    surrogate treats rounding as straight-through.
    """
    spec.validate()
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]

    if spec.kind == "noise":
        noisy = image + rng.normal(0.0, spec.sigma, image.shape)
        inside = ((noisy > 0) & (noisy < 1)).astype(np.float64)
        out = np.clip(noisy, 0.0, 1.0)
        return out, lambda g: g * inside

    if spec.kind == "rotation":
        angle = rng.uniform(-spec.angle_range, spec.angle_range)
        sx, sy = imageops.rotation_grid(H, W, angle)
        out = imageops.bilinear_sample(image, sx, sy)
        return out, lambda g: imageops.bilinear_sample_adjoint(
            g, sx, sy, H, W)

    if spec.kind == "scaling":
        h2 = max(1, int(round(H * spec.factor)))
        w2 = max(1, int(round(W * spec.factor)))
        small = imageops.resize_bilinear(image, h2, w2)
        out = imageops.resize_bilinear(small, H, W)

        def vjp_scale(g):
            g_small = imageops.resize_bilinear_adjoint(g, h2, w2)
            return imageops.resize_bilinear_adjoint(g_small, H, W)
        return out, vjp_scale

    if spec.kind == "blur":
        if spec.sigma == 0:
            return image.copy(), lambda g: g.copy()
        kernel = imageops.gaussian_kernel(spec.sigma)
        out = imageops.separable_convolve(image, kernel)
        return out, lambda g: imageops.separable_convolve(g, kernel)

    if spec.kind == "crop":
        mask = imageops.center_crop_mask(H, W, spec.keep_fraction)
        return image * mask[:, :, None], lambda g: g * mask[:, :, None]

    if spec.kind == "jpeg":
        return _jpeg(image, spec.quality,
                     surrogate=spec.mode == "train-surrogate")

    raise ConfigurationError(f"unknown distortion {spec.kind!r}")


# --- minimal baseline JPEG (quantize-dequantize round trip, 4:2:0) --------

_Q_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)

_Q_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99]], dtype=np.float64)

_RGB2YCC = np.array([[0.299, 0.587, 0.114],
                     [-0.168736, -0.331264, 0.5],
                     [0.5, -0.418688, -0.081312]])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def _quality_table(base: np.ndarray, quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((base * scale + 50.0) / 100.0), 1, 255)


def _blockwise(plane: np.ndarray):
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblock(blocks: np.ndarray):
    hb, wb = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(hb * 8, wb * 8)


def _plane_roundtrip(plane: np.ndarray, table: np.ndarray):
    blocks = _blockwise(plane - 128.0)
    coeffs = dctn(blocks, axes=(-2, -1), norm="ortho")
    quant = np.round(coeffs / table) * table
    return _unblock(idctn(quant, axes=(-2, -1), norm="ortho")) + 128.0


def _jpeg(image: np.ndarray, quality: int, surrogate: bool):
    H, W = image.shape[:2]
    ph = (16 - H % 16) % 16
    pw = (16 - W % 16) % 16
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")

    ycc = padded * 255.0 @ _RGB2YCC.T
    ycc[:, :, 1:] += 128.0
    y = ycc[:, :, 0]
    hp, wp = y.shape
    chroma = ycc[:, :, 1:]
    sub = chroma.reshape(hp // 2, 2, wp // 2, 2, 2).mean(axis=(1, 3))

    qy = _quality_table(_Q_LUMA, quality)
    qc = _quality_table(_Q_CHROMA, quality)
    y2 = _plane_roundtrip(y, qy)
    sub2 = np.stack([_plane_roundtrip(sub[:, :, c], qc)
                     for c in range(2)], axis=2)
    up = np.repeat(np.repeat(sub2, 2, axis=0), 2, axis=1)

    ycc2 = np.concatenate([y2[:, :, None], up], axis=2)
    ycc2[:, :, 1:] -= 128.0
    rgb = (ycc2 @ _YCC2RGB.T) / 255.0
    inside = ((rgb > 0) & (rgb < 1)).astype(np.float64)[:H, :W]
    out = np.clip(rgb, 0.0, 1.0)[:H, :W]

    if not surrogate:
        return out, None

    def vjp(g):
        # Straight-through rounding: DCT/IDCT cancel, leaving the color
        # transform, subsampling, and padding chain.
        gp = np.zeros((H + ph, W + pw, 3))
        gp[:H, :W] = g * inside
        g_ycc = gp @ _YCC2RGB / 255.0
        g_y = g_ycc[:, :, 0]
        g_up = g_ycc[:, :, 1:]
        g_sub = g_up.reshape(hp // 2, 2, wp // 2, 2, 2).sum(axis=(1, 3))
        g_chroma = np.repeat(np.repeat(g_sub / 4.0, 2, axis=0), 2, axis=1)
        g_pad = np.concatenate([g_y[:, :, None], g_chroma],
                               axis=2) @ _RGB2YCC * 255.0
        # Fold edge-padding gradients back onto the border pixels.
        if ph:
            g_pad[H - 1] += g_pad[H:].sum(axis=0)
        if pw:
            g_pad[:, W - 1] += g_pad[:, W:].sum(axis=1)
        return g_pad[:H, :W]
    return out, vjp


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_from_logits(logits: np.ndarray, bits: np.ndarray) -> float:
    """Numerically stable mean BCE(sigmoid(z), b)."""
    z = np.asarray(logits, dtype=np.float64)
    b = np.asarray(bits, dtype=np.float64)
    softplus = np.logaddexp(0.0, z)
    return float(np.mean(softplus - b * z))


def bce_grad_logits(logits: np.ndarray, bits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    b = np.asarray(bits, dtype=np.float64)
    return (_sigmoid(z) - b) / len(z)


def wm_losses(decoder: Decoder, clean_views, distorted_views,
              message: Message):
    """Clean and EOT watermark losses over view-averaged logits."""
    if len(message) != decoder.n_bits:
        raise ContractViolation("message length does not match decoder")
    if not len(clean_views):
        raise ContractViolation("need at least one clean view")
    z_clean = aggregate_logits([decode(decoder, img)
                                for img in clean_views])
    l_clean = bce_from_logits(z_clean, message.bits)
    if len(distorted_views):
        losses = []
        for batch in distorted_views:
            views = batch if isinstance(batch, (list, tuple)) else [batch]
            z = aggregate_logits([decode(decoder, img) for img in views])
            losses.append(bce_from_logits(z, message.bits))
        l_eot = float(np.mean(losses))
    else:
        l_eot = 0.0
    return l_clean, l_eot


def total_wm_loss(l_clean: float, l_eot: float, l_wav_low: float,
                  lambdas) -> float:
    """Weighted total watermark objective."""
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.shape != (3,) or np.any(lam < 0):
        raise ConfigurationError("need three non-negative weights")
    return float(lam[0] * l_clean + lam[1] * l_eot + lam[2] * l_wav_low)
