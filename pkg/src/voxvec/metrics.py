"""Separation quality metrics and the evaluation harness.

SDR and SI-SDR are computed in float64 and capped at +60 dB. STOI follows
the published recipe at 10 kHz: silent-frame removal, 15 one-third-octave
band envelopes from short-time spectra (512-sample windows, 256 hop),
normalised and clipped over 30-frame segments, averaged linear correlation.
"""

from __future__ import annotations

import json
import math
import statistics
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_core import Waveform, resample, write_wav
from .errors import DegenerateInputError, InvalidArgumentError

_CAP_DB = 60.0

_STOI_RATE = 10000
_STOI_WIN = 512
_STOI_HOP = 256
_STOI_BANDS = 15
_STOI_BAND_START_HZ = 150.0
_STOI_SEGMENT_FRAMES = 30
_STOI_CLIP_DB = -15.0
_STOI_SILENCE_DB = 40.0


def _as_array(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    return np.asarray(w, dtype=np.float64)


def _check_pair(ref: np.ndarray, est: np.ndarray) -> None:
    if ref.shape != est.shape:
        raise InvalidArgumentError(f"length mismatch: ref {ref.shape} vs est {est.shape}")
    if not np.any(ref):
        raise DegenerateInputError("reference signal is silent")


def _ratio_db(signal_energy: float, error_energy: float) -> float:
    if error_energy <= 0.0:
        return _CAP_DB
    return min(_CAP_DB, 10.0 * math.log10(signal_energy / error_energy))


def sdr(ref, est) -> float:
    """10 log10(||ref||^2 / ||ref - est||^2), capped at +60 dB."""
    ref = _as_array(ref)
    est = _as_array(est)
    _check_pair(ref, est)
    err = ref - est
    return _ratio_db(float(np.dot(ref, ref)), float(np.dot(err, err)))


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR: project est onto ref before scoring."""
    ref = _as_array(ref)
    est = _as_array(est)
    _check_pair(ref, est)
    alpha = float(np.dot(est, ref) / np.dot(ref, ref))
    target = alpha * ref
    err = est - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(err, err)))


def si_sdr_improvement(ref, est, mixture) -> float:
    return si_sdr(ref, est) - si_sdr(ref, mixture)


def _third_octave_bands(n_fft: int, rate: int) -> np.ndarray:
    """Boolean matrix (bands, bins) grouping rfft bins into 1/3-octave bands."""
    bin_hz = np.arange(n_fft // 2 + 1) * rate / n_fft
    matrix = np.zeros((_STOI_BANDS, bin_hz.size), dtype=bool)
    for k in range(_STOI_BANDS):
        center = _STOI_BAND_START_HZ * 2.0 ** (k / 3.0)
        lo = center / 2.0 ** (1.0 / 6.0)
        hi = center * 2.0 ** (1.0 / 6.0)
        matrix[k] = (bin_hz >= lo) & (bin_hz < hi)
    return matrix


def _frame(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    n_frames = 1 + (x.size - _STOI_WIN) // _STOI_HOP
    idx = np.arange(_STOI_WIN)[None, :] + _STOI_HOP * np.arange(n_frames)[:, None]
    return x[idx] * win[None, :]


def stoi(ref: Waveform, est: Waveform) -> float:
    """Short-time objective intelligibility of est against ref."""
    if len(ref) != len(est):
        raise InvalidArgumentError(f"length mismatch: {len(ref)} vs {len(est)}")
    if ref.sample_rate != est.sample_rate:
        raise InvalidArgumentError("sample rates differ")
    if ref.rms() <= 0:
        raise DegenerateInputError("reference signal is silent")
    x = resample(ref, _STOI_RATE).samples
    y = resample(est, _STOI_RATE).samples
    if x.size < _STOI_WIN:
        raise InvalidArgumentError("signal too short for STOI framing")
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(_STOI_WIN) / _STOI_WIN)
    xf = _frame(x, win)
    yf = _frame(y, win)

    # Remove frames more than 40 dB below the loudest reference frame.
    energy = np.sum(xf**2, axis=1)
    keep = energy > energy.max() * 10.0 ** (-_STOI_SILENCE_DB / 10.0)
    xf = xf[keep]
    yf = yf[keep]
    if xf.shape[0] < _STOI_SEGMENT_FRAMES:
        raise InvalidArgumentError(
            f"only {xf.shape[0]} speech-active frames; need {_STOI_SEGMENT_FRAMES}"
        )

    bands = _third_octave_bands(_STOI_WIN, _STOI_RATE)
    x_spec = np.abs(np.fft.rfft(xf, axis=1)) ** 2
    y_spec = np.abs(np.fft.rfft(yf, axis=1)) ** 2
    x_env = np.sqrt(x_spec @ bands.T)  # (frames, bands)
    y_env = np.sqrt(y_spec @ bands.T)

    clip_gain = 10.0 ** (-_STOI_CLIP_DB / 20.0)
    eps = 1e-12
    correlations = []
    n_frames = x_env.shape[0]
    for m in range(_STOI_SEGMENT_FRAMES, n_frames + 1):
        xs = x_env[m - _STOI_SEGMENT_FRAMES : m]  # (30, bands)
        ys = y_env[m - _STOI_SEGMENT_FRAMES : m]
        scale = np.linalg.norm(xs, axis=0) / (np.linalg.norm(ys, axis=0) + eps)
        ys_n = np.minimum(ys * scale[None, :], xs * (1.0 + clip_gain))
        xc = xs - xs.mean(axis=0, keepdims=True)
        yc = ys_n - ys_n.mean(axis=0, keepdims=True)
        sx = np.linalg.norm(xc, axis=0)
        sy = np.linalg.norm(yc, axis=0)
        valid = (sx > eps) & (sy > eps)
        if np.any(valid):
            d = np.sum(xc[:, valid] * yc[:, valid], axis=0) / (sx[valid] * sy[valid])
            correlations.extend(d.tolist())
    if not correlations:
        raise InvalidArgumentError("no non-degenerate band segments for STOI")
    return float(np.mean(correlations))


@dataclass
class MetricReport:
    """Per-example metric rows plus recomputable aggregates for one experiment tag."""

    tag: str
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def aggregate(self, stat: str = "median") -> dict:
        out = {}
        fn = statistics.median if stat == "median" else statistics.fmean
        for key in ("sdr_db", "si_sdr_db", "si_sdri_db", "stoi", "pesq"):
            values = [r[key] for r in self.rows if r.get(key) is not None]
            out[key] = float(fn(values)) if values else None
        return out

    def to_jsonl(self) -> str:
        lines = [json.dumps(row, sort_keys=True) for row in self.rows]
        return "\n".join(lines) + "\n" if lines else ""


def render_table(reports: list[MetricReport], stat: str = "median") -> str:
    """Aligned text table: one column per experiment tag, one row per metric."""
    metric_rows = [
        ("SDR (dB)", "sdr_db", 1),
        ("SI-SDR (dB)", "si_sdr_db", 1),
        ("SI-SDRi (dB)", "si_sdri_db", 1),
        ("STOI", "stoi", 1),
        ("STOI x100", "stoi", 100),
        ("PESQ", "pesq", 1),
    ]
    aggregates = [r.aggregate(stat) for r in reports]
    label_w = max(len(label) for label, _, _ in metric_rows)
    col_w = max([len(r.tag) for r in reports] + [8]) + 2
    header = " " * label_w + "".join(r.tag.rjust(col_w) for r in reports)
    lines = [header]
    for label, key, factor in metric_rows:
        values = []
        for agg in aggregates:
            v = agg[key]
            if v is None:
                values.append("--".rjust(col_w))
            elif factor == 100:
                values.append(f"{v * 100:.0f}".rjust(col_w))
            else:
                values.append(f"{v:.2f}".rjust(col_w))
        if all(v.strip() == "--" for v in values) and key == "pesq":
            continue
        lines.append(label.ljust(label_w) + "".join(values))
    return "\n".join(lines) + "\n"


def parse_grid(text: str) -> list[tuple[int, int]]:
    """Parse "1:0,1:1,3:2,3:3" into [(1,0), (1,1), (3,2), (3,3)]."""
    cells = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 2:
            raise InvalidArgumentError(f"bad grid cell {chunk!r}; expected POS:NEG")
        try:
            pos, neg = int(parts[0]), int(parts[1])
        except ValueError:
            raise InvalidArgumentError(f"bad grid cell {chunk!r}; expected integers") from None
        if pos < 1 or neg < 0:
            raise InvalidArgumentError(f"grid cell {chunk!r} needs pos >= 1 and neg >= 0")
        cells.append((pos, neg))
    if not cells:
        raise InvalidArgumentError("empty evaluation grid")
    return cells


def grid_tag(n_pos: int, n_neg: int) -> str:
    return f"{n_pos}pos|{n_neg}neg"


def run_pesq_cmd(pesq_cmd: str, ref: Waveform, est: Waveform) -> float | None:
    """Invoke an external scorer as `cmd ref.wav est.wav`, parsing one float."""
    with tempfile.TemporaryDirectory() as tmp:
        ref_path = Path(tmp) / "ref.wav"
        est_path = Path(tmp) / "est.wav"
        write_wav(ref_path, ref)
        write_wav(est_path, est)
        try:
            proc = subprocess.run(
                [*pesq_cmd.split(), str(ref_path), str(est_path)],
                capture_output=True, text=True, timeout=120, check=True,
            )
        except (subprocess.SubprocessError, OSError):
            return None
    for token in proc.stdout.split():
        try:
            return float(token)
        except ValueError:
            continue
    return None


def evaluate(manifest, corpus, separator, embedder, grid: list[tuple[int, int]],
             modality_plan: str | None = None, pesq_cmd: str | None = None,
             out_dir=None) -> list[MetricReport]:
    """Score the separator over a manifest for every (n_pos, n_neg) grid cell.

    `separator` maps (mixture, positives, negatives) -> Waveform; `embedder`
    maps manifest enrolment entries -> embedding vectors. Reports are
    deterministic for fixed inputs; with out_dir set, one JSONL per cell plus
    an aligned table are written.
    """
    from .dataset_forge import build_mixture  # local to avoid import cycles

    reports = []
    for n_pos, n_neg in grid:
        report = MetricReport(tag=grid_tag(n_pos, n_neg))
        for idx, entry in enumerate(manifest.entries):
            if len(entry.enrolment.positives) < n_pos:
                raise InvalidArgumentError(
                    f"entry {idx} has {len(entry.enrolment.positives)} positive "
                    f"candidates; grid needs {n_pos}"
                )
            if len(entry.enrolment.negatives) < n_neg:
                raise InvalidArgumentError(
                    f"entry {idx} has {len(entry.enrolment.negatives)} negative "
                    f"candidates; grid needs {n_neg}"
                )
            a_m, a_t, _ = build_mixture(entry.mixture, corpus)
            positives = [
                embedder(corpus, e, plan_override=modality_plan)
                for e in entry.enrolment.positives[:n_pos]
            ]
            negatives = [
                embedder(corpus, e, plan_override=modality_plan)
                for e in entry.enrolment.negatives[:n_neg]
            ]
            est = separator(a_m, positives, negatives)
            row = {
                "example": idx,
                "sdr_db": sdr(a_t, est),
                "si_sdr_db": si_sdr(a_t, est),
                "si_sdri_db": si_sdr_improvement(a_t, est, a_m),
                "stoi": stoi(a_t, est),
                "pesq": run_pesq_cmd(pesq_cmd, a_t, est) if pesq_cmd else None,
            }
            report.add(**row)
        reports.append(report)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for report in reports:
            name = report.tag.replace("|", "_")
            (out_dir / f"report_{name}.jsonl").write_text(report.to_jsonl())
        (out_dir / "table.txt").write_text(render_table(reports))
    return reports
