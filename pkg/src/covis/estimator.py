"""Pluggable relative-pose estimators: a calibrated synthetic oracle and a remote hook.

The synthetic estimator corrupts the true relative pose with sampled noise whose
median error is calibrated per visibility class (a pair is "invisible" when the
relative rotation exceeds the observer's field of view). Error magnitudes are
half-normal with a per-sample scale: the scale carries a lognormal jitter around
the class scale, and the class scale is solved numerically so the magnitude
distribution's median equals the configured median exactly. The reported
uncertainties are the true per-sample scales times a miscalibration factor, so
a jitter of zero gives a class-constant report and any positive jitter makes
the report informative about the individual draw.

Reported sigma_q lives on the chordal scale: the straight-line quaternion-pair
distance sqrt(8)*sin(angle/2) that the chordal loss squares.
"""

from __future__ import annotations

import math
import socket
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import erf, erfinv

from .geometry import Pose, UnitQuat, Vec3, compose, relative_pose, rot_geodesic_deg

# Median of |N(0,1)| = sqrt(2)*erfinv(1/2); a half-normal with scale
# median/_HN_MEDIAN has the requested median.
_HN_MEDIAN = math.sqrt(2.0) * float(erfinv(0.5))

RESPONSE_FLOATS = 17  # p:3, sigma_p:3, q:4, sigma_q:1, reserved:6
RESPONSE_BYTES = RESPONSE_FLOATS * 8


class RemoteEstimateError(Exception):
    """Base error for the remote estimator wire protocol."""


class RemoteFramingError(RemoteEstimateError):
    """Response truncated or otherwise malformed."""


class RemoteValidationError(RemoteEstimateError):
    """Response decoded but violates PoseEstimate invariants."""


@dataclass(frozen=True)
class Observation:
    """One node's view at a tick: opaque embedding plus hidden ground truth.

    ``pose_truth`` exists for the simulator and the synthetic noise generator
    only; estimator consumers must treat the embedding as the sole input.
    """

    node_id: int
    pose_truth: Pose
    fov_deg: float
    embedding: bytes
    tick: int = 0


@dataclass(frozen=True)
class PoseEstimate:
    """Relative pose of dst in src's ego frame, with aleatoric uncertainties."""

    p_hat: Vec3
    sigma_p: Vec3  # per-axis standard deviation, meters
    q_hat: UnitQuat
    sigma_q: float  # chordal-scale standard deviation
    src: int
    dst: int

    def __post_init__(self):
        if min(self.sigma_p.x, self.sigma_p.y, self.sigma_p.z) <= 0.0:
            raise ValueError("sigma_p components must be positive")
        if self.sigma_q <= 0.0:
            raise ValueError("sigma_q must be positive")

    def sigma_p_norm(self) -> float:
        """Scalar uncertainty score used for filtering and gating."""
        return self.sigma_p.norm()

    def to_dict(self) -> dict:
        return {
            "src": self.src,
            "dst": self.dst,
            "p_hat": list(self.p_hat.as_tuple()),
            "sigma_p": list(self.sigma_p.as_tuple()),
            "q_hat": list(self.q_hat.as_tuple()),
            "sigma_q": self.sigma_q,
        }

    @staticmethod
    def from_dict(d: dict) -> "PoseEstimate":
        return PoseEstimate(
            p_hat=Vec3(*d["p_hat"]),
            sigma_p=Vec3(*d["sigma_p"]),
            q_hat=UnitQuat(*d["q_hat"]),
            sigma_q=float(d["sigma_q"]),
            src=int(d["src"]),
            dst=int(d["dst"]),
        )


@dataclass(frozen=True)
class NoiseProfile:
    """Per-visibility-class median errors plus report miscalibration.

    Defaults model a monocular relative-pose estimator with visible-pair
    error medians of 33 cm / 5.8 deg and invisible-pair medians of
    97 cm / 7.9 deg. ``sigma_jitter`` is the lognormal spread of the
    per-sample noise scale; zero makes every sample of a class share the
    class scale.
    """

    median_pos_visible: float = 0.33
    median_pos_invisible: float = 0.97
    median_rot_visible: float = 5.8
    median_rot_invisible: float = 7.9
    miscalibration: float = 1.0
    sigma_jitter: float = 0.4

    def __post_init__(self):
        for m in (
            self.median_pos_visible,
            self.median_pos_invisible,
            self.median_rot_visible,
            self.median_rot_invisible,
        ):
            if m <= 0.0:
                raise ValueError("profile medians must be positive")
        if self.miscalibration <= 0.0:
            raise ValueError("miscalibration must be positive")
        if self.sigma_jitter < 0.0:
            raise ValueError("sigma_jitter must be non-negative")


@lru_cache(maxsize=None)
def _mixture_median_factor(jitter: float) -> float:
    """Median of exp(jitter*g)*|z| for independent standard normals g, z.

    Solved from E_g[erf(t*exp(-jitter*g)/sqrt(2))] = 1/2 with Gauss-Hermite
    quadrature; reduces to the half-normal median at jitter = 0.
    """
    if jitter == 0.0:
        return _HN_MEDIAN
    nodes, weights = np.polynomial.hermite.hermgauss(81)
    g = math.sqrt(2.0) * nodes
    w = weights / math.sqrt(math.pi)

    def cdf_minus_half(t: float) -> float:
        return float(np.sum(w * erf(t * np.exp(-jitter * g) / math.sqrt(2.0)))) - 0.5

    return float(brentq(cdf_minus_half, 1e-9, 1e4, xtol=1e-14, rtol=8.9e-16))


def scale_for_median(median: float, jitter: float) -> float:
    """Class scale whose jittered half-normal magnitude has the given median."""
    return median / _mixture_median_factor(jitter)


def chordal_sigma(angle_scale_deg: float) -> float:
    """Chordal-scale equivalent of a geodesic angle scale."""
    a = math.radians(min(angle_scale_deg, 180.0))
    return math.sqrt(8.0) * math.sin(0.5 * a)


def edge_rng(seed: int, tick: int, src: int, dst: int) -> np.random.Generator:
    """Deterministic per-edge RNG substream, independent of evaluation order."""
    return np.random.default_rng(np.random.SeedSequence([seed, tick, src, dst]))


def _edge_invisible(rel: Pose, fov_deg: float) -> bool:
    # Same rule metrics.is_invisible applies to truth edges.
    return rot_geodesic_deg(rel.rotation, UnitQuat.identity()) > fov_deg


def _unit_vector(rng: np.random.Generator) -> Vec3:
    while True:
        v = rng.standard_normal(3)
        n = float(np.linalg.norm(v))
        if n > 1e-12:
            return Vec3(v[0] / n, v[1] / n, v[2] / n)


def estimate(
    obs_i: Observation,
    obs_j: Observation,
    profile: NoiseProfile,
    rng: np.random.Generator,
) -> PoseEstimate:
    """Truth relative pose corrupted by calibrated synthetic noise.

    Position error: uniform direction, magnitude half-normal with a per-sample
    scale (class scale times lognormal jitter). Rotation error: random axis,
    geodesic magnitude from the same family. Reported sigmas are the true
    per-sample scales times the profile miscalibration; the position report is
    split isotropically so its Euclidean norm equals the sample scale.
    """
    rel = relative_pose(obs_i.pose_truth, obs_j.pose_truth)
    invisible = _edge_invisible(rel, obs_i.fov_deg)
    m_pos = profile.median_pos_invisible if invisible else profile.median_pos_visible
    m_rot = profile.median_rot_invisible if invisible else profile.median_rot_visible
    tau = profile.sigma_jitter

    # Fixed draw order keeps results reproducible per substream.
    s_pos = scale_for_median(m_pos, tau) * math.exp(tau * rng.standard_normal())
    direction = _unit_vector(rng)
    r_pos = s_pos * abs(rng.standard_normal())
    s_rot = scale_for_median(m_rot, tau) * math.exp(tau * rng.standard_normal())
    axis = _unit_vector(rng)
    r_rot_deg = min(s_rot * abs(rng.standard_normal()), 179.9)

    p_hat = rel.position + direction * r_pos
    q_hat = rel.rotation.multiply(UnitQuat.from_axis_angle(axis, math.radians(r_rot_deg)))

    mc = profile.miscalibration
    axis_sigma = s_pos / math.sqrt(3.0) * mc
    return PoseEstimate(
        p_hat=p_hat,
        sigma_p=Vec3(axis_sigma, axis_sigma, axis_sigma),
        q_hat=q_hat,
        sigma_q=chordal_sigma(s_rot) * mc,
        src=obs_i.node_id,
        dst=obs_j.node_id,
    )


def estimate_oracle(
    obs_i: Observation, obs_j: Observation, sigma_floor: float = 1e-3
) -> PoseEstimate:
    """Noiseless baseline: exact relative pose, sigmas at the configured floor."""
    rel = relative_pose(obs_i.pose_truth, obs_j.pose_truth)
    return PoseEstimate(
        p_hat=rel.position,
        sigma_p=Vec3(sigma_floor, sigma_floor, sigma_floor),
        q_hat=rel.rotation,
        sigma_q=sigma_floor,
        src=obs_i.node_id,
        dst=obs_j.node_id,
    )


def compose_estimates(a: PoseEstimate, b: PoseEstimate) -> Pose:
    """Chain two relative estimates (i->j, j->k) into an i->k pose."""
    return compose(Pose(a.p_hat, a.q_hat), Pose(b.p_hat, b.q_hat))


def encode_request(emb_i: bytes, emb_j: bytes) -> bytes:
    """Two embeddings, each prefixed with a 4-byte little-endian length."""
    return struct.pack("<I", len(emb_i)) + emb_i + struct.pack("<I", len(emb_j)) + emb_j


def decode_response(data: bytes, src: int = 0, dst: int = 0) -> PoseEstimate:
    """17 little-endian float64 values -> PoseEstimate (reserved tail ignored)."""
    if len(data) != RESPONSE_BYTES:
        raise RemoteFramingError(f"expected {RESPONSE_BYTES} response bytes, got {len(data)}")
    vals = struct.unpack("<17d", data)
    try:
        q = UnitQuat(vals[6], vals[7], vals[8], vals[9])
    except ValueError as exc:
        raise RemoteValidationError(f"non-unit quaternion in response: {exc}") from exc
    try:
        return PoseEstimate(
            p_hat=Vec3(vals[0], vals[1], vals[2]),
            sigma_p=Vec3(vals[3], vals[4], vals[5]),
            q_hat=q,
            sigma_q=vals[10],
            src=src,
            dst=dst,
        )
    except ValueError as exc:
        raise RemoteValidationError(str(exc)) from exc


def remote_estimate(
    endpoint: tuple[str, int],
    obs_i_embedding: bytes,
    obs_j_embedding: bytes,
    timeout: float = 2.0,
    src: int = 0,
    dst: int = 0,
) -> PoseEstimate:
    """Query an external pose model over a stream socket.

    Raises TimeoutError on timeout, RemoteFramingError on a short or malformed
    response and RemoteValidationError when the decoded estimate violates its
    invariants.
    """
    with socket.create_connection(endpoint, timeout=timeout) as sock:
        sock.sendall(encode_request(obs_i_embedding, obs_j_embedding))
        chunks = []
        remaining = RESPONSE_BYTES
        while remaining > 0:
            chunk = sock.recv(remaining)
            if not chunk:
                break
            chunks.append(chunk)
            remaining -= len(chunk)
    return decode_response(b"".join(chunks), src=src, dst=dst)
