"""Vibrotactile signal conditioning.

Raw tri-axial acceleration -> high-pass -> DFT321 single-axis fusion ->
512-sample segments with max-abs normalization -> wavelet packet tensor
of shape (N, F, T) with F = 2**depth bands and T = 512 / 2**depth steps.

Bands are returned in natural (Paley) order: at each tree level a node's
approximation child precedes its detail child. This is *not* ascending
frequency order; use :func:`paley_to_frequency_order` if that is needed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pywt
from scipy import signal

SEGMENT_LENGTH = 512
DEFAULT_WAVELET = "db4"
DEFAULT_DEPTH = 4
DEFAULT_CUTOFF_HZ = 10.0
FILTER_ORDER = 4

VTRX_MAGIC = b"VTRX"
VTXF_MAGIC = b"VTXF"
FORMAT_VERSION = 1


class PreprocessError(ValueError):
    """Raised when a recording or tensor violates a preprocessing contract."""


@dataclass
class RawRecording:
    """Tri-axial acceleration for N sensors, shape (N, 3, T_raw)."""

    samples: np.ndarray
    sample_rate_hz: float = 2000.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 3 or self.samples.shape[1] != 3:
            raise PreprocessError(
                f"expected samples of shape (N, 3, T_raw), got {self.samples.shape}"
            )
        if not self.sample_rate_hz > 0:
            raise PreprocessError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            bad = np.argwhere(~np.isfinite(self.samples))[0]
            raise PreprocessError(f"non-finite sample at index {tuple(int(i) for i in bad)}")

    @property
    def n_nodes(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[2]


@dataclass
class SignalSegment:
    samples: np.ndarray  # (N, 512)
    segment_index: int
    scale: float = 1.0
    degenerate: bool = False


@dataclass
class SpectroTemporalTensor:
    coeffs: np.ndarray  # (N, F, T)
    wavelet_name: str = DEFAULT_WAVELET
    depth: int = DEFAULT_DEPTH
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.coeffs.shape


def highpass_filter(rec: RawRecording, cutoff_hz: float = DEFAULT_CUTOFF_HZ,
                    order: int = FILTER_ORDER) -> RawRecording:
    """Zero-phase Butterworth high-pass applied independently to every axis.

    The filter runs forward and backward (``sosfiltfilt``), so the effective
    magnitude response is the square of the designed order-``order`` filter
    and the phase response is zero.
    """
    nyquist = rec.sample_rate_hz / 2.0
    if not 0 < cutoff_hz < nyquist:
        raise PreprocessError(
            f"cutoff_hz must lie in (0, {nyquist}) for fs={rec.sample_rate_hz}, got {cutoff_hz}"
        )
    sos = signal.butter(order, cutoff_hz, btype="highpass", fs=rec.sample_rate_hz, output="sos")
    filtered = signal.sosfiltfilt(sos, rec.samples, axis=-1)
    return RawRecording(filtered, rec.sample_rate_hz)


def highpass_response(freqs_hz, cutoff_hz=DEFAULT_CUTOFF_HZ, sample_rate_hz=2000.0,
                      order=FILTER_ORDER):
    """Magnitude response of :func:`highpass_filter` (forward-backward) at ``freqs_hz``."""
    sos = signal.butter(order, cutoff_hz, btype="highpass", fs=sample_rate_hz, output="sos")
    _, h = signal.sosfreqz(sos, worN=np.atleast_1d(freqs_hz), fs=sample_rate_hz)
    return np.abs(h) ** 2


def dft321(rec) -> np.ndarray:
    """Fuse three acceleration axes into one real signal per node.

    For each frequency bin the output magnitude is sqrt(|Ax|^2 + |Ay|^2 + |Az|^2)
    and the output phase is that of Ax + Ay + Az. Working on the one-sided
    spectrum (rfft/irfft) keeps the result real.

    Args:
        rec: a :class:`RawRecording` or an array shaped (..., 3, T).

    Returns:
        Array shaped (..., T).
    """
    x = rec.samples if isinstance(rec, RawRecording) else np.asarray(rec, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] != 3:
        raise PreprocessError(f"expected (..., 3, T) axis layout, got shape {x.shape}")
    n = x.shape[-1]
    spec = np.fft.rfft(x, axis=-1)
    magnitude = np.sqrt(np.sum(np.abs(spec) ** 2, axis=-2))
    phase = np.angle(np.sum(spec, axis=-2))
    return np.fft.irfft(magnitude * np.exp(1j * phase), n=n, axis=-1)


def segment_and_normalize(series: np.ndarray, length: int = SEGMENT_LENGTH) -> list[SignalSegment]:
    """Cut (N, T_raw) into non-overlapping segments, each scaled to unit max-abs.

    One scalar per segment (the max |value| over all channels). The trailing
    remainder shorter than ``length`` is dropped. An all-zero segment keeps a
    divisor of 1 and is flagged ``degenerate``.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise PreprocessError(f"expected (N, T_raw), got shape {series.shape}")
    if series.shape[1] < length:
        raise PreprocessError(f"need at least {length} samples, got {series.shape[1]}")
    count = series.shape[1] // length
    out = []
    for k in range(count):
        seg = series[:, k * length:(k + 1) * length]
        peak = float(np.max(np.abs(seg)))
        degenerate = peak == 0.0
        scale = 1.0 if degenerate else peak
        out.append(SignalSegment(seg / scale, k, scale, degenerate))
    return out


def _check_wavelet(wavelet: str) -> pywt.Wavelet:
    try:
        w = pywt.Wavelet(wavelet)
    except ValueError as exc:
        raise PreprocessError(f"unknown wavelet {wavelet!r}") from exc
    if not w.orthogonal:
        raise PreprocessError(f"wavelet {wavelet!r} is not orthogonal")
    return w


def wpt_decompose(seg, depth: int = DEFAULT_DEPTH, wavelet: str = DEFAULT_WAVELET) -> SpectroTemporalTensor:
    """Full wavelet packet tree to ``depth`` using periodized orthogonal filters.

    ``seg`` may be a :class:`SignalSegment` or any array whose last axis is
    the time axis; leading axes are carried through, so a stack of segments
    (S, N, 512) yields coefficients (S, N, F, T).
    """
    w = _check_wavelet(wavelet)
    x = seg.samples if isinstance(seg, SignalSegment) else np.asarray(seg, dtype=np.float64)
    n = x.shape[-1]
    if depth < 1 or n % (2 ** depth):
        raise PreprocessError(f"2**depth must divide the segment length {n}, got depth={depth}")
    bands = [x]
    for _ in range(depth):
        bands = [c for b in bands for c in pywt.dwt(b, w, mode="periodization", axis=-1)]
    coeffs = np.stack(bands, axis=-2)
    return SpectroTemporalTensor(coeffs, wavelet, depth)


def wpt_reconstruct(x: SpectroTemporalTensor, depth: int | None = None,
                    wavelet: str | None = None) -> np.ndarray:
    """Inverse of :func:`wpt_decompose`. Returns samples shaped (..., F*T).

    Passing ``depth``/``wavelet`` asserts what the caller expects; a mismatch
    against the tensor's metadata is rejected.
    """
    if depth is not None and depth != x.depth:
        raise PreprocessError(f"depth mismatch: tensor has {x.depth}, caller expects {depth}")
    if wavelet is not None and wavelet != x.wavelet_name:
        raise PreprocessError(f"wavelet mismatch: tensor has {x.wavelet_name!r}, caller expects {wavelet!r}")
    if x.coeffs.shape[-2] != 2 ** x.depth:
        raise PreprocessError(
            f"band count {x.coeffs.shape[-2]} does not match depth {x.depth} (expected {2 ** x.depth})"
        )
    w = _check_wavelet(x.wavelet_name)
    bands = [x.coeffs[..., f, :] for f in range(x.coeffs.shape[-2])]
    while len(bands) > 1:
        bands = [
            pywt.idwt(bands[i], bands[i + 1], w, mode="periodization", axis=-1)
            for i in range(0, len(bands), 2)
        ]
    return bands[0]


def paley_to_frequency_order(depth: int) -> np.ndarray:
    """Permutation taking natural-order band indices to ascending frequency.

    ``coeffs[..., perm, :]`` reorders bands by frequency. Uses the Gray-code
    relation between the two orderings.
    """
    idx = np.arange(2 ** depth)
    return idx ^ (idx >> 1)


def preprocess_recording(rec: RawRecording, cutoff_hz=DEFAULT_CUTOFF_HZ,
                         wavelet=DEFAULT_WAVELET, depth=DEFAULT_DEPTH):
    """Run the whole chain on one recording.

    Returns:
        (coeffs, scales, degenerate) with coeffs shaped (S, N, F, T).
    """
    fused = dft321(highpass_filter(rec, cutoff_hz))
    segments = segment_and_normalize(fused)
    stacked = np.stack([s.samples for s in segments])
    coeffs = wpt_decompose(stacked, depth, wavelet).coeffs
    scales = np.array([s.scale for s in segments])
    degenerate = np.array([s.degenerate for s in segments])
    return coeffs, scales, degenerate


# ---------------------------------------------------------------------------
# binary formats


def write_vtrx(path, rec: RawRecording):
    n, _, t_raw = rec.samples.shape
    with open(path, "wb") as fh:
        fh.write(VTRX_MAGIC)
        fh.write(struct.pack("<IIId", FORMAT_VERSION, n, t_raw, rec.sample_rate_hz))
        fh.write(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())


def read_vtrx(path) -> RawRecording:
    """Read a VTRX recording: header then N x 3 x T_raw float32 (node, axis, time)."""
    raw = Path(path).read_bytes()
    header = struct.calcsize("<IIId")
    if len(raw) < 4 + header or raw[:4] != VTRX_MAGIC:
        raise PreprocessError(f"{path}: not a VTRX file")
    version, n, t_raw, fs = struct.unpack_from("<IIId", raw, 4)
    if version != FORMAT_VERSION:
        raise PreprocessError(f"{path}: unsupported VTRX version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=4 + header)
    if body.size != n * 3 * t_raw:
        raise PreprocessError(f"{path}: expected {n * 3 * t_raw} samples, found {body.size}")
    return RawRecording(body.reshape(n, 3, t_raw).astype(np.float64), fs)


def write_vtxf(path, coeffs: np.ndarray, labels: np.ndarray | None = None, meta: dict | None = None):
    """Write (count, N, F, T) float32 tensors, optional count x N label bytes, JSON sidecar."""
    coeffs = np.asarray(coeffs)
    count, n, f, t = coeffs.shape
    with open(path, "wb") as fh:
        fh.write(VTXF_MAGIC)
        fh.write(struct.pack("<IIIII", FORMAT_VERSION, count, n, f, t))
        fh.write(np.ascontiguousarray(coeffs, dtype="<f4").tobytes())
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (count, n):
                raise PreprocessError(f"labels must be ({count}, {n}), got {labels.shape}")
            fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_vtxf(path):
    """Returns (coeffs float32 (count, N, F, T), labels uint8 (count, N) or None, meta dict)."""
    raw = Path(path).read_bytes()
    hsize = struct.calcsize("<IIIII")
    if len(raw) < 4 + hsize or raw[:4] != VTXF_MAGIC:
        raise PreprocessError(f"{path}: not a VTXF file")
    version, count, n, f, t = struct.unpack_from("<IIIII", raw, 4)
    if version != FORMAT_VERSION:
        raise PreprocessError(f"{path}: unsupported VTXF version {version}")
    offset = 4 + hsize
    nvals = count * n * f * t
    coeffs = np.frombuffer(raw, dtype="<f4", count=nvals, offset=offset).reshape(count, n, f, t)
    offset += 4 * nvals
    rest = len(raw) - offset
    labels = None
    if rest == count * n:
        labels = np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(count, n).copy()
    elif rest != 0:
        raise PreprocessError(f"{path}: {rest} trailing bytes do not form a label block")
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return coeffs.copy(), labels, meta


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
