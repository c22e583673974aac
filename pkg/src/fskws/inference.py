"""Enrollment by prototype averaging and threshold-based open-set detection."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .audio import DspConfig, Waveform, featurize
from .protonet import DISTANCES, PrototypeSet, compute_prototypes, pairwise_distances

PROFILE_VERSION = 1
UNKNOWN_LABEL = "unknown"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class DetectionConfig:
    d_th: float = float("inf")
    distance: str = "squared_euclidean"

    def __post_init__(self):
        if not self.d_th >= 0:
            raise ValueError("d_th must be >= 0")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")


@dataclass
class EnrollmentProfile:
    prototypes: PrototypeSet
    distance: str = "squared_euclidean"
    dsp_digest: str = ""
    checkpoint_hash: str = ""
    d_th: float | None = None
    n_supports: dict = field(default_factory=dict)

    @property
    def keywords(self):
        return list(self.prototypes.class_ids)

    def save(self, path):
        blob = {
            "version": PROFILE_VERSION,
            "keywords": self.keywords,
            "prototypes": self.prototypes.prototypes.astype(np.float64).tolist(),
            "distance": self.distance,
            "dsp_digest": self.dsp_digest,
            "checkpoint_hash": self.checkpoint_hash,
            "d_th": self.d_th,
            "n_supports": self.n_supports,
        }
        with open(path, "w") as fh:
            json.dump(blob, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EnrollmentProfile":
        with open(path) as fh:
            blob = json.load(fh)
        if blob.get("version") != PROFILE_VERSION:
            raise ValueError(f"unsupported profile version {blob.get('version')}")
        protos = PrototypeSet(np.asarray(blob["prototypes"], dtype=np.float64), blob["keywords"])
        return cls(protos, blob["distance"], blob["dsp_digest"], blob["checkpoint_hash"],
                   blob["d_th"], blob["n_supports"])


@dataclass
class DetectionResult:
    predicted: int                 # candidate index, or ``unknown_index`` when rejected
    candidate: int
    distance_to_candidate: float
    all_distances: np.ndarray
    unknown_index: int

    @property
    def is_unknown(self) -> bool:
        return self.predicted == self.unknown_index


def enroll_embeddings(support_embeddings: dict, distance="squared_euclidean",
                      **meta) -> EnrollmentProfile:
    """Build a profile from per-keyword support embeddings (test seam, no encoder)."""
    if not support_embeddings:
        raise ValueError("no keywords to enroll")
    keywords = list(support_embeddings)
    protos = []
    for kw in keywords:
        e = np.asarray(support_embeddings[kw], dtype=np.float64)
        if e.ndim != 2 or len(e) == 0:
            raise ValueError(f"keyword {kw!r} has no supports")
        protos.append(e.mean(axis=0))
    n_supports = {kw: len(support_embeddings[kw]) for kw in keywords}
    return EnrollmentProfile(PrototypeSet(np.stack(protos), keywords), distance,
                             n_supports=n_supports, **meta)


def enroll(encoder, supports: dict, dsp: DspConfig, distance="squared_euclidean",
           checkpoint_hash: str = "") -> EnrollmentProfile:
    """``supports`` maps keyword -> list of Waveforms."""
    if not supports:
        raise ValueError("no keywords to enroll")
    embs = {}
    for kw, waves in supports.items():
        if not waves:
            raise ValueError(f"keyword {kw!r} has no supports")
        feats = np.stack([featurize(w, dsp) for w in waves])
        embs[kw] = encoder.embed(feats)
    return enroll_embeddings(embs, distance, dsp_digest=dsp.digest(),
                             checkpoint_hash=checkpoint_hash)


def detect_embedding(profile: EnrollmentProfile, emb, det: DetectionConfig) -> DetectionResult:
    if det.distance != profile.distance:
        raise ValueError("detection metric differs from the enrollment metric")
    d = pairwise_distances(np.asarray(emb, dtype=np.float64)[None],
                           profile.prototypes.prototypes, det.distance)[0]
    cand = int(np.argmin(d))
    n = len(profile.prototypes)
    predicted = cand if d[cand] < det.d_th else n
    return DetectionResult(predicted, cand, float(d[cand]), d, n)


def detect(profile: EnrollmentProfile, encoder, query: Waveform, dsp: DspConfig,
           det: DetectionConfig) -> DetectionResult:
    if profile.dsp_digest and profile.dsp_digest != dsp.digest():
        raise ValueError("profile was enrolled with a different DSP configuration")
    emb = encoder.embed(featurize(query, dsp)[None])[0]
    return detect_embedding(profile, emb, det)


def result_label(profile: EnrollmentProfile, r: DetectionResult) -> str:
    return UNKNOWN_LABEL if r.is_unknown else profile.keywords[r.predicted]


def export_embeddings(encoder, clips, dsp: DspConfig, out_path, batch_size: int = 128) -> int:
    """Write ``label<TAB>file_id<TAB>v1 v2 ...`` lines; ``clips`` yields Clip objects."""
    n = 0
    with open(out_path, "w") as fh:
        batch = []

        def flush():
            nonlocal n
            feats = np.stack([featurize(c.load(), dsp) for c in batch])
            for clip, e in zip(batch, encoder.embed(feats)):
                vals = " ".join(repr(float(v)) for v in e)
                fh.write(f"{clip.keyword}\t{clip.clip_id}\t{vals}\n")
                n += 1
            batch.clear()

        for clip in clips:
            batch.append(clip)
            if len(batch) == batch_size:
                flush()
        if batch:
            flush()
    return n


def read_embeddings(path):
    labels, ids, rows = [], [], []
    with open(path) as fh:
        for line in fh:
            label, fid, vals = line.rstrip("\n").split("\t")
            labels.append(label)
            ids.append(fid)
            rows.append(np.array([float(v) for v in vals.split()]))
    return labels, ids, np.stack(rows) if rows else np.zeros((0, 0))
