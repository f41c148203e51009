"""Synthetic facial-echo scenes.

A face is a handful of point reflectors (forehead, cheeks, mouth, chin)
whose distances oscillate sinusoidally by millimetres to centimetres. Each expression
class has its own canonical motion signature; individual persons perturb it,
and a ``DomainProfile`` applies a systematic shift (distance, motion style,
clutter, noise) on top.

Echo amplitude falls as ``reflectivity / R**2`` and every echo is the chirp
train delayed by the round-trip time ``2 R(t) / v0``, evaluated analytically
so fractional delays need no interpolation.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import signal as sps

from .errors import ConfigError
from .sigproc import (
    SPEED_OF_SOUND,
    AcousticBuffer,
    ChirpSpec,
    Spectrogram,
    chirp_train,
    preprocess,
)

logger = logging.getLogger(__name__)

NOMINAL_FACE_DISTANCE = 0.30


class ExpressionClass(enum.IntEnum):
    anger = 0
    disgust = 1
    fear = 2
    happiness = 3
    sadness = 4
    surprise = 5


N_CLASSES = len(ExpressionClass)
CLASS_NAMES = [c.name for c in ExpressionClass]


@dataclass(frozen=True)
class ReflectorSpec:
    base_distance: float
    motion_amplitude: float = 0.0
    motion_freq: float = 0.0
    motion_phase: float = 0.0
    reflectivity: float = 0.01

    def __post_init__(self):
        if self.base_distance <= 0:
            raise ConfigError("reflector base_distance must be positive")
        if abs(self.motion_amplitude) >= self.base_distance:
            raise ConfigError("motion_amplitude must be smaller than base_distance")
        if self.reflectivity < 0:
            raise ConfigError("reflectivity must be nonnegative")

    def distance(self, t):
        return self.base_distance + self.motion_amplitude * np.sin(
            2 * np.pi * self.motion_freq * t + self.motion_phase)


@dataclass
class SceneSpec:
    expression: ExpressionClass
    face_reflectors: List[ReflectorSpec]
    clutter_reflectors: List[ReflectorSpec] = field(default_factory=list)
    face_distance: float = NOMINAL_FACE_DISTANCE
    direct_path_gain: float = 1.0
    ambient_noise_level: float = 0.0
    inband_noise_level: float = 0.0
    person_id: str = "p0"
    domain_id: str = "d0"
    seed: int = 0

    def __post_init__(self):
        if not 0.2 <= self.face_distance <= 0.6:
            raise ConfigError(f"face_distance {self.face_distance} outside [0.2, 0.6] m")
        if self.ambient_noise_level < 0 or self.inband_noise_level < 0:
            raise ConfigError("noise levels must be nonnegative")

    @property
    def clutter(self) -> bool:
        return bool(self.clutter_reflectors)


@dataclass
class DomainProfile:
    """Systematic shift applied to every scene generated for one domain.

    ``class_offsets`` maps a class name to ``{"distance", "amplitude",
    "phase"}`` deltas added to that class's face reflectors.
    """

    name: str = "plain"
    distance_offset: float = 0.0
    amplitude_scale: float = 1.0
    freq_scale: float = 1.0
    phase_offset: float = 0.0
    class_offsets: Dict[str, Dict[str, float]] = field(default_factory=dict)
    clutter_intensity: float = 0.0
    mask: bool = False
    ambient_noise: float = 0.02
    inband_noise: float = 0.002
    ambient_noise_scale: float = 1.0
    inband_noise_scale: float = 1.0
    direct_path_gain: float = 1.0
    distance_jitter: float = 0.01

    def __post_init__(self):
        for name in self.class_offsets:
            if name not in CLASS_NAMES:
                raise ConfigError(f"unknown class {name!r} in class_offsets")
        if self.amplitude_scale < 0 or self.freq_scale <= 0:
            raise ConfigError("amplitude_scale must be >= 0 and freq_scale > 0")
        if min(self.ambient_noise, self.inband_noise, self.ambient_noise_scale,
               self.inband_noise_scale, self.clutter_intensity) < 0:
            raise ConfigError("noise levels and clutter intensity must be nonnegative")
        if not 0.2 <= NOMINAL_FACE_DISTANCE + self.distance_offset <= 0.6:
            raise ConfigError("distance_offset moves the face outside [0.2, 0.6] m")

    @property
    def has_clutter(self) -> bool:
        return self.mask or self.clutter_intensity > 0


# Canonical expression signatures: one row per reflector,
# (offset from face distance [m], motion amplitude [m], motion freq [Hz], phase [rad], reflectivity).
_REGIONS = ("forehead", "left_cheek", "right_cheek", "mouth", "chin")
_TEMPLATES = {
    ExpressionClass.anger: [
        (0.000, 0.006, 3.0, 0.0, 0.012),
        (-0.008, 0.002, 3.0, 0.5, 0.010),
        (-0.008, 0.002, 3.0, 0.9, 0.010),
        (0.016, 0.002, 3.0, 1.2, 0.008),
        (0.028, 0.001, 3.0, 2.0, 0.006),
    ],
    ExpressionClass.disgust: [
        (0.000, 0.001, 4.0, 0.3, 0.012),
        (-0.010, 0.008, 4.0, 0.0, 0.010),
        (-0.006, 0.001, 4.0, 2.5, 0.010),
        (0.014, 0.003, 4.0, 0.7, 0.008),
        (0.026, 0.001, 4.0, 1.0, 0.006),
    ],
    ExpressionClass.fear: [
        (0.002, 0.002, 9.0, 1.0, 0.012),
        (-0.008, 0.002, 9.0, 1.5, 0.010),
        (-0.008, 0.002, 9.0, 1.8, 0.010),
        (0.020, 0.002, 9.0, 0.2, 0.008),
        (0.032, 0.002, 9.0, 0.4, 0.006),
    ],
    ExpressionClass.happiness: [
        (0.000, 0.001, 2.5, 0.0, 0.012),
        (-0.012, 0.010, 2.5, 0.0, 0.010),
        (-0.012, 0.010, 2.5, 0.0, 0.010),
        (0.012, 0.004, 2.5, 3.1, 0.008),
        (0.026, 0.001, 2.5, 1.5, 0.006),
    ],
    ExpressionClass.sadness: [
        (0.001, 0.001, 1.5, 2.0, 0.012),
        (-0.007, 0.001, 1.5, 0.0, 0.010),
        (-0.007, 0.001, 1.5, 0.3, 0.010),
        (0.018, 0.001, 1.5, 0.5, 0.008),
        (0.030, 0.001, 1.5, 2.5, 0.006),
    ],
    ExpressionClass.surprise: [
        (-0.002, 0.004, 5.0, 0.0, 0.012),
        (-0.008, 0.002, 5.0, 0.8, 0.010),
        (-0.008, 0.002, 5.0, 1.1, 0.010),
        (0.040, 0.015, 5.0, 0.6, 0.008),
        (0.050, 0.012, 5.0, 0.9, 0.006),
    ],
}

PERSON_SPREAD = 0.20
DISTANCE_SPREAD = 0.05


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary scene coordinates."""
    key = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def canonical_template(cls: ExpressionClass) -> List[ReflectorSpec]:
    return [
        ReflectorSpec(NOMINAL_FACE_DISTANCE + off, amp, freq, phase, refl)
        for off, amp, freq, phase, refl in _TEMPLATES[ExpressionClass(cls)]
    ]


def expression_template(cls: ExpressionClass, person_seed: int) -> List[ReflectorSpec]:
    """Per-person variant of the canonical signature, deterministic in its inputs.

    Motion and reflectivity parameters are scaled by independent factors in
    ``[0.8, 1.2]``. Distances share one per-person factor in ``[0.95, 1.05]``
    (face size and holding distance), which keeps the relative geometry of
    a face intact.
    """
    face_rng = np.random.default_rng(derive_seed("face", person_seed))
    fd = face_rng.uniform(1 - DISTANCE_SPREAD, 1 + DISTANCE_SPREAD)
    rng = np.random.default_rng(derive_seed("person", person_seed, int(cls)))
    out = []
    for r in canonical_template(cls):
        f = rng.uniform(1 - PERSON_SPREAD, 1 + PERSON_SPREAD, size=4)
        out.append(ReflectorSpec(
            base_distance=r.base_distance * fd,
            motion_amplitude=r.motion_amplitude * f[0],
            motion_freq=r.motion_freq * f[1],
            motion_phase=r.motion_phase * f[2],
            reflectivity=r.reflectivity * f[3],
        ))
    return out


def pink_noise(n: int, rng: np.random.Generator, sample_rate: float, cutoff: float = 8000.0) -> np.ndarray:
    """Unit-RMS 1/f noise low-passed at ``cutoff``."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    f[0] = f[1]
    x = np.fft.irfft(spec / np.sqrt(f), n=n)
    sos = sps.butter(8, cutoff, btype="lowpass", fs=sample_rate, output="sos")
    x = sps.sosfiltfilt(sos, x)
    return x / np.sqrt(np.mean(x * x))


def inband_noise(n: int, rng: np.random.Generator, spec: ChirpSpec) -> np.ndarray:
    white = rng.standard_normal(n)
    sos = sps.butter(4, [spec.f_start, spec.f_end], btype="bandpass",
                     fs=spec.sample_rate, output="sos")
    x = sps.sosfiltfilt(sos, white)
    return x / np.sqrt(np.mean(x * x))


def echo(reflector: ReflectorSpec, t: np.ndarray, chirp: ChirpSpec,
         v0: float = SPEED_OF_SOUND) -> np.ndarray:
    R = reflector.distance(t)
    return reflector.reflectivity / R ** 2 * chirp.waveform(t - 2.0 * R / v0)


def simulate_recording(scene: SceneSpec, chirp: ChirpSpec = ChirpSpec(),
                       duration: float = 1.0) -> AcousticBuffer:
    """Microphone signal for one scene, fully determined by ``scene.seed``."""
    if duration < chirp.emission_period:
        raise ConfigError("duration shorter than one emission period")
    n = int(round(duration * chirp.sample_rate))
    t = np.arange(n) / chirp.sample_rate
    x = scene.direct_path_gain * chirp.waveform(t)
    for r in list(scene.face_reflectors) + list(scene.clutter_reflectors):
        x = x + echo(r, t, chirp)
    if scene.ambient_noise_level > 0 or scene.inband_noise_level > 0:
        rng = np.random.default_rng(scene.seed)
        if scene.ambient_noise_level > 0:
            x = x + scene.ambient_noise_level * pink_noise(n, rng, chirp.sample_rate)
        if scene.inband_noise_level > 0:
            x = x + scene.inband_noise_level * inband_noise(n, rng, chirp)
    return AcousticBuffer(x, chirp.sample_rate, "synthetic")


def direct_path_template(scene: SceneSpec, chirp: ChirpSpec = ChirpSpec(),
                         duration: float = 1.0) -> AcousticBuffer:
    """Face-free, clutter-free, noise-free recording of the same device."""
    n = int(round(duration * chirp.sample_rate))
    return AcousticBuffer(scene.direct_path_gain * chirp_train(chirp, n), chirp.sample_rate)


def build_scene(cls: ExpressionClass, person_seed: int, profile: DomainProfile,
                person_id: str, domain_id: str, seed: int) -> SceneSpec:
    """Place a person's expression into a domain, with per-recording jitter."""
    rng = np.random.default_rng(seed)
    cls = ExpressionClass(cls)
    off = profile.class_offsets.get(cls.name, {})
    face_distance = NOMINAL_FACE_DISTANCE + profile.distance_offset + off.get("distance", 0.0)
    face_distance += rng.uniform(-profile.distance_jitter, profile.distance_jitter)
    face_distance = float(np.clip(face_distance, 0.2, 0.6))
    shift = face_distance - NOMINAL_FACE_DISTANCE
    rep_phase = rng.uniform(0, 2 * np.pi)
    face = []
    for r in expression_template(cls, person_seed):
        amp = r.motion_amplitude * profile.amplitude_scale * (1 + off.get("amplitude", 0.0))
        face.append(ReflectorSpec(
            base_distance=r.base_distance + shift,
            motion_amplitude=amp,
            motion_freq=r.motion_freq * profile.freq_scale,
            motion_phase=r.motion_phase + profile.phase_offset + off.get("phase", 0.0) + rep_phase,
            reflectivity=r.reflectivity,
        ))
    clutter = []
    if profile.mask:
        gap = rng.uniform(0.02, 0.04)
        clutter.append(ReflectorSpec(face_distance - gap, 0.0, 0.0, 0.0, 0.006))
    if profile.clutter_intensity > 0:
        for dist in (0.75, 1.4):
            clutter.append(ReflectorSpec(dist * rng.uniform(0.95, 1.05), 0.0, 0.0, 0.0,
                                         profile.clutter_intensity * dist ** 2))
    inband = profile.inband_noise * profile.inband_noise_scale * (1.1 if profile.mask else 1.0)
    return SceneSpec(
        expression=cls,
        face_reflectors=face,
        clutter_reflectors=clutter,
        face_distance=face_distance,
        direct_path_gain=profile.direct_path_gain,
        ambient_noise_level=profile.ambient_noise * profile.ambient_noise_scale,
        inband_noise_level=inband,
        person_id=person_id,
        domain_id=domain_id,
        seed=seed,
    )


@dataclass
class LabeledSample:
    spectrogram: Spectrogram
    label: int
    person_id: str
    domain_id: str
    clutter: bool = False
    sample_id: str = ""
    recording_id: str = ""
    frame_index: int = 0

    def manifest_row(self, spectrogram_path: str = "") -> dict:
        return {
            "sample_id": self.sample_id,
            "class": CLASS_NAMES[self.label],
            "person_id": self.person_id,
            "domain_id": self.domain_id,
            "clutter": bool(self.clutter),
            "spectrogram_path": spectrogram_path,
            "frame_index": int(self.frame_index),
        }


def iter_scenes(profiles: Sequence[DomainProfile], persons_per_domain: int, reps: int,
                seed: int, domain_ids: Optional[Sequence[str]] = None,
                shared_persons: bool = False):
    """Yield ``(recording_id, scene)`` over domain x person x class x repetition.

    By default every domain has its own persons; with ``shared_persons`` the
    same ``persons_per_domain`` people appear in every domain.
    """
    if persons_per_domain < 1 or reps < 1:
        raise ConfigError("persons_per_domain and reps must be >= 1")
    domain_ids = list(domain_ids) if domain_ids else [p.name for p in profiles]
    if len(set(domain_ids)) != len(domain_ids):
        raise ConfigError("domain ids must be unique")
    for profile, did in zip(profiles, domain_ids):
        for pi in range(persons_per_domain):
            person_id = f"p{pi}" if shared_persons else f"{did}-p{pi}"
            person_seed = derive_seed(seed, "shared", pi) if shared_persons else derive_seed(seed, did, pi)
            for cls in ExpressionClass:
                for rep in range(reps):
                    rid = f"{did}-p{pi}-{cls.name}-r{rep}"
                    scene_seed = derive_seed(seed, did, pi, int(cls), rep)
                    yield rid, build_scene(cls, person_seed, profile, person_id, did, scene_seed)


def generate_dataset(profiles: Sequence[DomainProfile], persons_per_domain: int, reps: int,
                     chirp: ChirpSpec = ChirpSpec(), seed: int = 0, duration: float = 1.0,
                     frame_len: float = 0.25, domain_ids: Optional[Sequence[str]] = None,
                     shared_persons: bool = False, **preprocess_kw) -> List[LabeledSample]:
    """Simulate and preprocess every recording; one sample per frame."""
    samples = []
    for rid, scene in iter_scenes(profiles, persons_per_domain, reps, seed, domain_ids, shared_persons):
        rec = simulate_recording(scene, chirp, duration)
        tmpl = direct_path_template(scene, chirp, duration)
        frames = preprocess(rec, chirp, frame_len, template=tmpl, **preprocess_kw)
        for k, spec in enumerate(frames):
            samples.append(LabeledSample(
                spectrogram=spec,
                label=int(scene.expression),
                person_id=scene.person_id,
                domain_id=scene.domain_id,
                clutter=scene.clutter,
                sample_id=f"{rid}-f{k}",
                recording_id=rid,
                frame_index=k,
            ))
    logger.info("generated %d samples", len(samples))
    return samples


def with_profile(profile: DomainProfile, **changes) -> DomainProfile:
    return replace(profile, **changes)
