"""Synthetic patient cohorts, label binning and surrogate pretraining domains.

Images are generated in standardized units and mapped to pixel intensities
with a per-domain (mean, std); the same constants are used to normalize at
training time. Pixel values are rounded to float32 so the raw float32
export format round-trips exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter


class Domain(str, Enum):
    XRAY_LIKE = "XRAY_LIKE"
    RGB_LIKE = "RGB_LIKE"


class BPDGrade(str, Enum):
    NONE = "None"
    MILD = "Mild"
    MODERATE = "Moderate"
    SEVERE = "Severe"


MISSING = None


@dataclass(frozen=True)
class DomainStats:
    mean: float
    std: float


@dataclass(frozen=True)
class ImageModel:
    """Parameters of the synthetic image generator (all amplitudes in std units)."""

    size: int = 32
    xray_mean: float = 0.5
    xray_std: float = 0.25
    rgb_offset: float = 0.3
    rgb_std: float = 0.15
    band_amplitude: float = 1.0
    band_freq: tuple[float, float] = (3.0, 5.0)
    pos_angle_deg: float = 0.0
    neg_angle_deg: float = 90.0
    angle_jitter_deg: float = 10.0
    background_amplitude: float = 0.8
    background_corr: float = 4.0
    style_amplitude: float = 0.6
    style_corr: float = 6.0
    style_texture_amplitude: float = 0.5
    style_texture_corr: float = 1.0
    pixel_noise: float = 0.3
    irds_speckle: float = 0.35

    def stats(self, domain: Domain) -> DomainStats:
        if Domain(domain) is Domain.XRAY_LIKE:
            return DomainStats(self.xray_mean, self.xray_std)
        return DomainStats(self.xray_mean + self.rgb_offset, self.rgb_std)


@dataclass
class PatientRecord:
    patient_id: int
    images: list[np.ndarray]
    bpd_grade: BPDGrade
    irds_grades: tuple[int | None, int | None, int | None]

    @property
    def bpd_label(self) -> int:
        return bin_bpd(self.bpd_grade)

    @property
    def irds_label(self) -> int | None:
        return bin_irds(self.irds_grades)

    def label(self, target: str = "bpd") -> int | None:
        return self.bpd_label if target == "bpd" else self.irds_label


@dataclass
class Cohort:
    patients: list[PatientRecord]
    seed: int
    domain: Domain = Domain.XRAY_LIKE
    image_model: ImageModel = field(default_factory=ImageModel)

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ValueError("patient ids must be unique")
        self._by_id = {p.patient_id: p for p in self.patients}

    def __len__(self) -> int:
        return len(self.patients)

    def patient(self, pid: int) -> PatientRecord:
        return self._by_id[pid]

    def ids(self, label: int | None = None, target: str = "bpd") -> list[int]:
        return [p.patient_id for p in self.patients
                if label is None or p.label(target) == label]

    def subset(self, pids) -> "Cohort":
        keep = set(pids)
        return Cohort([p for p in self.patients if p.patient_id in keep], self.seed,
                      self.domain, self.image_model)

    def with_target(self, target: str) -> "Cohort":
        """Drop patients whose label for ``target`` is missing (IRDS exclusions)."""
        return Cohort([p for p in self.patients if p.label(target) is not None],
                      self.seed, self.domain, self.image_model)


# ------------------------------------------------------------------ binning

def bin_bpd(grade) -> int:
    grade = BPDGrade(grade)
    return 1 if grade in (BPDGrade.MODERATE, BPDGrade.SEVERE) else 0


def irds_consensus(grades) -> int | None:
    """Strict majority of three expert grades, else their median; None if any is missing."""
    if len(grades) != 3:
        raise ValueError("expected exactly three expert grades")
    if any(g is None for g in grades):
        return None
    for g in grades:
        if not 1 <= g <= 4:
            raise ValueError(f"IRDS grade out of range: {g}")
    counts = {g: list(grades).count(g) for g in grades}
    for g, c in counts.items():
        if c >= 2:
            return int(g)
    return int(sorted(grades)[1])


def bin_irds(grades) -> int | None:
    c = irds_consensus(grades)
    if c is None:
        return None
    return 1 if c >= 3 else 0


# --------------------------------------------------------------- generators

def _coords(size: int):
    ax = (np.arange(size) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="ij")


def _smooth_field(rng, size, corr):
    f = gaussian_filter(rng.normal(size=(size, size)), corr, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def _band(size, angle_deg, freq, phase):
    yy, xx = _coords(size)
    th = np.deg2rad(angle_deg)
    return np.cos(2 * np.pi * freq * (xx * np.cos(th) + yy * np.sin(th)) + phase)


def _to_pixels(z, stats: DomainStats) -> np.ndarray:
    img = stats.mean + stats.std * z
    return img.astype(np.float32).astype(np.float64)[None]


def normalize(images: np.ndarray, stats: DomainStats) -> np.ndarray:
    return (np.asarray(images, dtype=np.float64) - stats.mean) / stats.std


def _patient_style(rng, m: ImageModel):
    return (m.style_amplitude * _smooth_field(rng, m.size, m.style_corr)
            + m.style_texture_amplitude * _smooth_field(rng, m.size, m.style_texture_corr)
            + 0.3 * rng.normal())


def _cohort_image(rng, m: ImageModel, style, label, signal, irds_severity):
    z = style + m.background_amplitude * _smooth_field(rng, m.size, m.background_corr)
    z = z + m.pixel_noise * rng.normal(size=(m.size, m.size))
    if signal > 0:
        angle = m.pos_angle_deg if label == 1 else m.neg_angle_deg
        angle += rng.uniform(-m.angle_jitter_deg, m.angle_jitter_deg)
        freq = rng.uniform(*m.band_freq)
        z = z + signal * m.band_amplitude * _band(m.size, angle, freq, rng.uniform(0, 2 * np.pi))
    # diffuse granular opacity that scales with IRDS severity (0..1)
    z = z + m.irds_speckle * irds_severity * (np.abs(rng.normal(size=(m.size, m.size))) - 0.8)
    return z


def generate_cohort(seed: int, n_pos: int = 57, n_neg: int = 104,
                    images_per_patient: tuple[int, int] = (1, 3), signal_strength: float = 0.3,
                    image_model: ImageModel | None = None, irds_coupling: float = 0.15,
                    irds_missing_rate: float = 0.0, id_offset: int = 0) -> Cohort:
    """Draw a labelled cohort; identical arguments give a bit-identical cohort.

    Each patient has a shared style (smooth bias field + fine texture) across
    its 1..3 images, so patient leakage between train and test is rewarded.
    ``irds_coupling`` shifts the latent IRDS severity of positive patients;
    in the pixels that shift is scaled by ``signal_strength``.
    """
    if n_pos < 1 or n_neg < 1:
        raise ValueError("need at least one patient per class")
    if not 0.0 <= signal_strength <= 1.0:
        raise ValueError("signal_strength must lie in [0, 1]")
    lo, hi = images_per_patient
    if not 1 <= lo <= hi:
        raise ValueError("invalid images_per_patient range")
    m = image_model or ImageModel()
    stats = m.stats(Domain.XRAY_LIKE)
    rng = np.random.default_rng([seed, 0xC0])
    labels = np.array([1] * n_pos + [0] * n_neg)
    rng.shuffle(labels)
    patients = []
    for i, y in enumerate(labels):
        prng = np.random.default_rng([seed, 0xC1, i])
        grade = (BPDGrade.MODERATE if prng.random() < 0.6 else BPDGrade.SEVERE) if y else \
            (BPDGrade.NONE if prng.random() < 0.5 else BPDGrade.MILD)
        shift = irds_coupling * (2 * y - 1)
        noise = prng.normal(0, 0.8)
        latent = 2.4 + shift + noise
        grades = [int(np.clip(np.rint(latent + prng.normal(0, 0.5)), 1, 4)) for _ in range(3)]
        if irds_missing_rate > 0 and prng.random() < irds_missing_rate:
            grades[int(prng.integers(3))] = MISSING
        # the label-driven part of the visible opacity scales with signal_strength too,
        # so signal_strength=0 leaves no label information in the pixels
        severity = float(np.clip((1.4 + signal_strength * shift + noise) / 3.0, 0.0, 1.0))
        style = _patient_style(prng, m)
        n_img = int(prng.integers(lo, hi + 1))
        imgs = [_to_pixels(_cohort_image(prng, m, style, y, signal_strength, severity), stats)
                for _ in range(n_img)]
        patients.append(PatientRecord(id_offset + i, imgs, grade, tuple(grades)))
    return Cohort(patients, seed, Domain.XRAY_LIKE, m)


@dataclass
class PretrainTask:
    domain: Domain
    images: np.ndarray          # (n, 1, S, S) raw pixels
    labels: np.ndarray          # (n,) ints in [0, n_classes)
    n_classes: int
    stats: DomainStats

    def normalized(self) -> np.ndarray:
        return normalize(self.images, self.stats)


XRAY_PRETRAIN_ANGLES = (0.0, 45.0, 90.0, 135.0)


def _rgb_pattern(rng, m: ImageModel, cls: int):
    yy, xx = _coords(m.size)
    z = np.zeros((m.size, m.size))
    if cls < 2:
        # isotropic blobs: few large or many small
        count, radius = (3, 0.12) if cls == 0 else (12, 0.05)
        for _ in range(count):
            cy, cx = rng.uniform(0, 1, 2)
            z += rng.choice((-1.0, 1.0)) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
        z *= 2.0
    else:
        # concentric rings, low or high radial frequency
        freq = rng.uniform(2, 3) if cls == 2 else rng.uniform(5, 7)
        cy, cx = rng.uniform(0.3, 0.7, 2)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        z += 1.2 * np.cos(2 * np.pi * freq * r + rng.uniform(0, 2 * np.pi))
    return z


def generate_pretrain_task(domain: Domain | str, seed: int, n: int = 1200,
                           image_model: ImageModel | None = None) -> PretrainTask:
    """Four-class surrogate source task.

    XRAY_LIKE: oriented band classes on the cohort's background statistics
    and normalization. RGB_LIKE: isotropic blob/ring classes on a different
    background, shifted by ``rgb_offset`` and with its own normalization.
    """
    domain = Domain(domain)
    m = image_model or ImageModel()
    stats = m.stats(domain)
    n_classes = 4
    rng = np.random.default_rng([seed, 0xD0, 0 if domain is Domain.XRAY_LIKE else 1])
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    imgs = np.empty((n, 1, m.size, m.size))
    for i, c in enumerate(labels):
        if domain is Domain.XRAY_LIKE:
            z = _patient_style(rng, m) + m.background_amplitude * _smooth_field(rng, m.size, m.background_corr)
            z += m.pixel_noise * rng.normal(size=(m.size, m.size))
            angle = XRAY_PRETRAIN_ANGLES[c] + rng.uniform(-m.angle_jitter_deg, m.angle_jitter_deg)
            amp = rng.uniform(0.5, 1.5) * m.band_amplitude
            z += amp * _band(m.size, angle, rng.uniform(*m.band_freq), rng.uniform(0, 2 * np.pi))
        else:
            z = 0.5 * _smooth_field(rng, m.size, 2.0) + 0.2 * rng.normal(size=(m.size, m.size))
            z += _rgb_pattern(rng, m, int(c))
        imgs[i] = _to_pixels(z, stats)
    return PretrainTask(domain, imgs, labels.astype(int), n_classes, stats)


# ------------------------------------------------------------ import/export

def export_cohort(cohort: Cohort, directory: str | Path) -> Path:
    """Write raw little-endian float32 images plus an ``index.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in cohort.patients:
        files = []
        for k, img in enumerate(p.images):
            name = f"p{p.patient_id:05d}_{k}.f32"
            img.astype("<f4").tofile(d / name)
            files.append(name)
        entries.append({
            "patient_id": p.patient_id,
            "bpd_grade": p.bpd_grade.value,
            "bpd_label": p.bpd_label,
            "irds_grades": list(p.irds_grades),
            "irds_label": p.irds_label,
            "files": files,
        })
    index = {"seed": cohort.seed, "domain": cohort.domain.value,
             "image_size": cohort.image_model.size, "patients": entries}
    (d / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    return d


def import_cohort(directory: str | Path, image_model: ImageModel | None = None) -> Cohort:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    size = int(index["image_size"])
    m = image_model or ImageModel(size=size)
    patients = []
    for e in index["patients"]:
        imgs = [np.fromfile(d / f, dtype="<f4").astype(np.float64).reshape(1, size, size)
                for f in e["files"]]
        patients.append(PatientRecord(int(e["patient_id"]), imgs, BPDGrade(e["bpd_grade"]),
                                      tuple(e["irds_grades"])))
    return Cohort(patients, int(index["seed"]), Domain(index["domain"]), m)
