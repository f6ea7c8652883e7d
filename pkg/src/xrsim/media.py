"""Bandwidth and latency arithmetic for cloud-rendered XR streams.

Bitrates are kept as exact integers (bits/s) whenever every input is integral;
only the human-readable formatting rounds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from numbers import Real


class DomainError(ValueError):
    """An argument lies outside the domain of a calculation."""


class Codec(enum.Enum):
    NONE = "none"
    H264 = "h264"
    H265 = "h265"
    H266 = "h266"

    @classmethod
    def parse(cls, name: "str | Codec") -> "Codec":
        if isinstance(name, Codec):
            return name
        key = str(name).strip().lower().replace(".", "").replace("-", "")
        for codec in cls:
            if codec.value == key:
                return codec
        raise DomainError(f"unknown codec {name!r}; expected one of {[c.value for c in cls]}")


CODEC_RATIOS = {
    Codec.NONE: 1,
    Codec.H264: 102,
    Codec.H265: 215,
    Codec.H266: 350,
}

VOR_TARGET_MS = 7.0
CHANNELS = 3

# Named presets: display acuity and legacy settings.
PPD_PRESETS = {"legacy11": 11, "legacy21": 21, "legacy32": 32, "human": 60, "panoramic": 64}
FPS_PRESETS = {"legacy30": 30, "legacy60": 60, "xr90": 90, "xr120": 120}
FOV_PRESETS = {"panoramic": (360, 180), "partial": (120, 120)}


def _exact(x):
    """Collapse integral floats to int so products stay exact."""
    if isinstance(x, float) and x.is_integer():
        return int(x)
    return x


def _require_positive(**kwargs):
    for name, value in kwargs.items():
        if not isinstance(value, Real) or isinstance(value, bool) or not value > 0:
            raise DomainError(f"{name} must be > 0, got {value!r}")


def codec_ratio(codec: "str | Codec") -> int:
    return CODEC_RATIOS[Codec.parse(codec)]


@dataclass(frozen=True)
class MediaSpec:
    """Display and codec parameters of one XR stream.

    The pixel grid comes either from ``fov_width_deg`` x ``fov_height_deg`` at
    ``ppd`` pixels per degree, or from explicit ``width_px`` x ``height_px``.
    """

    bits_per_channel: int = 8
    refresh_rate_fps: float = 90
    eyes: int = 1
    codec: Codec = Codec.NONE
    fov_width_deg: float | None = None
    fov_height_deg: float | None = None
    ppd: float | None = None
    width_px: int | None = None
    height_px: int | None = None
    channels: int = CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "codec", Codec.parse(self.codec))
        errs = self.errors()
        if errs:
            raise DomainError("; ".join(errs))

    def errors(self) -> list[str]:
        errs = []
        fov = (self.fov_width_deg, self.fov_height_deg, self.ppd)
        px = (self.width_px, self.height_px)
        has_fov = any(v is not None for v in fov)
        has_px = any(v is not None for v in px)
        if has_fov and has_px:
            errs.append("give either fov_width_deg/fov_height_deg/ppd or width_px/height_px, not both")
        elif has_fov:
            if any(v is None for v in fov):
                errs.append("fov_width_deg, fov_height_deg and ppd must all be set")
        elif has_px:
            if any(v is None for v in px):
                errs.append("width_px and height_px must both be set")
        else:
            errs.append("no pixel grid: set fov_width_deg/fov_height_deg/ppd or width_px/height_px")
        for name in ("fov_width_deg", "fov_height_deg", "ppd", "width_px", "height_px"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                errs.append(f"{name} must be > 0, got {v!r}")
        if not self.refresh_rate_fps > 0:
            errs.append(f"refresh_rate_fps must be > 0, got {self.refresh_rate_fps!r}")
        if self.eyes not in (1, 2):
            errs.append(f"eyes must be in {{1, 2}}, got {self.eyes!r}")
        if not 1 <= self.bits_per_channel <= 16:
            errs.append(f"bits_per_channel must be in [1, 16], got {self.bits_per_channel!r}")
        if self.channels != CHANNELS:
            errs.append(f"channels is fixed at {CHANNELS}, got {self.channels!r}")
        return errs

    @property
    def resolution(self) -> tuple:
        """(width_px, height_px) of one eye's image."""
        if self.width_px is not None:
            return _exact(self.width_px), _exact(self.height_px)
        return (
            _exact(self.fov_width_deg) * _exact(self.ppd),
            _exact(self.fov_height_deg) * _exact(self.ppd),
        )

    @property
    def pixel_count(self):
        w, h = self.resolution
        return _exact(w * h)


def monocular_pixel_count(fov_w, fov_h, ppd):
    """Pixels of a monocular display covering ``fov_w`` x ``fov_h`` degrees."""
    _require_positive(fov_w=fov_w, fov_h=fov_h, ppd=ppd)
    fov_w, fov_h, ppd = _exact(fov_w), _exact(fov_h), _exact(ppd)
    return _exact((fov_h * ppd) * (fov_w * ppd))


def pixel_bitrate(pixels, bits_per_channel, fps, eyes=1, channels=CHANNELS):
    """channels x bits_per_channel x fps x pixels x eyes, for any non-negative factors."""
    factors = (pixels, bits_per_channel, fps, eyes, channels)
    if any(f < 0 for f in factors):
        raise DomainError(f"bitrate factors must be >= 0, got {factors!r}")
    return _exact(
        _exact(channels) * _exact(bits_per_channel) * _exact(fps) * _exact(pixels) * _exact(eyes)
    )


def raw_bitrate(spec: MediaSpec):
    """Uncompressed bitrate in bits/s of a validated :class:`MediaSpec`."""
    if not isinstance(spec, MediaSpec):
        raise DomainError(f"expected MediaSpec, got {type(spec).__name__}")
    errs = spec.errors()
    if errs:
        raise DomainError("; ".join(errs))
    return pixel_bitrate(spec.pixel_count, spec.bits_per_channel, spec.refresh_rate_fps, spec.eyes, spec.channels)


def compressed_bitrate(raw, codec: "str | Codec"):
    """Bitrate after a fixed-ratio codec. Returns a float unless the division is exact."""
    if raw < 0:
        raise DomainError(f"raw bitrate must be >= 0, got {raw!r}")
    ratio = codec_ratio(codec)
    if isinstance(raw, int) and raw % ratio == 0:
        return raw // ratio
    return raw / ratio


@dataclass(frozen=True)
class LatencyBudget:
    fps: float
    frame_deadline_ms: float
    sensing_ms: float
    rendering_ms: float
    display_ms: float
    vor_target_ms: float = VOR_TARGET_MS

    @property
    def streaming_budget_ms(self) -> float:
        return self.frame_deadline_ms - self.sensing_ms - self.rendering_ms - self.display_ms

    @property
    def feasible(self) -> bool:
        return self.streaming_budget_ms > 0


def latency_budget(fps, sensing_ms=0.0, rendering_ms=0.0, display_ms=0.0) -> LatencyBudget:
    """Per-frame motion-to-photon budget at ``fps`` and what is left for streaming.

    Infeasible budgets (streaming share <= 0) are returned with ``feasible`` False.
    """
    _require_positive(fps=fps)
    for name, v in (("sensing_ms", sensing_ms), ("rendering_ms", rendering_ms), ("display_ms", display_ms)):
        if v < 0:
            raise DomainError(f"{name} must be >= 0, got {v!r}")
    return LatencyBudget(
        fps=fps,
        frame_deadline_ms=1000.0 / fps,
        sensing_ms=sensing_ms,
        rendering_ms=rendering_ms,
        display_ms=display_ms,
    )


_PREFIXES = [(1e12, "Tb/s"), (1e9, "Gb/s"), (1e6, "Mb/s"), (1e3, "kb/s"), (1.0, "b/s")]


def round_sig(x: float, sig: int = 3) -> float:
    if x == 0:
        return 0.0
    return round(x, sig - 1 - math.floor(math.log10(abs(x))))


def format_rate(bps, sig: int = 3) -> str:
    """Render a bitrate with an SI prefix, rounded to ``sig`` significant figures."""
    for scale, unit in _PREFIXES:
        if abs(bps) >= scale:
            value = round_sig(bps / scale, sig)
            return f"{value:g} {unit}"
    return "0 b/s"


def worked_examples() -> list[tuple[str, float, float, str]]:
    """(label, computed, printed, unit) rows of the reference worked examples."""
    vive = MediaSpec(width_px=2160, height_px=1200, bits_per_channel=8, refresh_rate_fps=90)
    vive_raw = raw_bitrate(vive)
    h264 = compressed_bitrate(vive_raw, Codec.H264)
    pano = MediaSpec(fov_width_deg=360, fov_height_deg=180, ppd=11, bits_per_channel=8, refresh_rate_fps=30)
    pano_raw = raw_bitrate(pano)
    pano64 = MediaSpec(
        fov_width_deg=360, fov_height_deg=180, ppd=64, bits_per_channel=12, refresh_rate_fps=120, eyes=2
    )
    legacy30 = compressed_bitrate(
        raw_bitrate(MediaSpec(width_px=2160, height_px=1200, bits_per_channel=8, refresh_rate_fps=30)),
        Codec.H264,
    )
    return [
        ("raw 2160x1200 8-bit 90 fps", vive_raw, 5_598_720_000, "b/s"),
        ("H.264 monocular", h264 / 1e6, 55, "Mb/s"),
        ("H.264 binocular", 2 * h264 / 1e6, 110, "Mb/s"),
        ("H.264 monocular @ 30 fps (printed figure disagrees with formula)", legacy30 / 1e6, 37, "Mb/s"),
        ("panoramic 11 PPD 8-bit 30 fps", pano_raw / 1e9, 5.6, "Gb/s"),
        ("panoramic binocular", 2 * round(pano_raw / 1e9, 1), 11.2, "Gb/s"),
        ("panoramic 64 PPD 12-bit 120 fps binocular", raw_bitrate(pano64) / 1e12, 2.3, "Tb/s"),
        ("frame deadline @ 90 fps", latency_budget(90).frame_deadline_ms, 11.1, "ms"),
        ("frame deadline @ 120 fps", latency_budget(120).frame_deadline_ms, 8.3, "ms"),
        ("VOR target", latency_budget(90).vor_target_ms, 7, "ms"),
    ]
