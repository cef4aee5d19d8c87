"""Synthetic scene -> (CSI, radar, map) sample generation.

Geometry conventions, fixed across the package:

* Positions are (x, y, z) in meters inside a square footprint
  [-F, F] x [-F, F]; the receiver array sits near the -x edge.
* The receive array is a half-wavelength ULA along +y with boresight +x.
  Azimuth theta = atan2(dy, dx) measured from boresight, and every scene is
  constrained to the front half-plane so theta stays inside (-pi/2, pi/2].
* The channel is a clustered multipath sum over scatterer bounces (plus an
  optional line-of-sight path): each path contributes
  beta * exp(-j 2 pi f tau) * exp(j phi) * a(theta) per subcarrier.
* The radar is a colocated FMCW unit under the stop-and-hop approximation:
  a point target at range r, radial speed v, azimuth theta contributes phase
  2 pi (2 S r / c) t within a chirp, 2 pi (2 f_c v / c) T_c per chirp, and
  2 pi * spacing * sin(theta) per element. Range-angle / range-velocity maps
  are unnormalized 2D FFTs (numpy convention, no fftshift) averaged
  coherently over the remaining axis; a config switch averages magnitudes
  instead.

All randomness flows through explicitly passed numpy Generators; dataset
generation derives per-sample substreams as seed ^ index.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ComplexTensor, read_mstn, write_mstn

C_LIGHT = 299_792_458.0


class SceneError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scene and sample records


@dataclass(frozen=True)
class Scatterer:
    position: tuple[float, float, float]
    reflectivity: float
    velocity: tuple[float, float] = (0.0, 0.0)  # (vx, vy), m/s

    def __post_init__(self):
        if not self.reflectivity > 0:
            raise SceneError("scatterer reflectivity must be positive")


@dataclass(frozen=True)
class SceneSpec:
    scatterers: tuple[Scatterer, ...]
    tx_position: tuple[float, float, float]
    rx_position: tuple[float, float, float]
    footprint: float = 100.0

    def __post_init__(self):
        if len(self.scatterers) == 0:
            raise SceneError("scene needs at least one scatterer")
        if not self.footprint > 0:
            raise SceneError("footprint must be positive")
        for p in (self.tx_position, self.rx_position) + tuple(
            s.position for s in self.scatterers
        ):
            if abs(p[0]) > self.footprint or abs(p[1]) > self.footprint:
                raise SceneError(f"position {p} outside footprint")


@dataclass(frozen=True)
class PathParams:
    """One propagation path: amplitude, delay, random phase, azimuth."""

    beta: float
    tau: float
    phi: float
    theta: float

    def __post_init__(self):
        if self.tau < 0:
            raise SceneError("path delay must be non-negative")
        if not (-math.pi / 2 < self.theta <= math.pi / 2):
            raise SceneError("path azimuth outside (-pi/2, pi/2]")


@dataclass
class ChannelSample:
    h: ComplexTensor  # [n_antennas, n_subcarriers]
    f0: float
    bw: float
    snr_db: float | None = None


@dataclass(frozen=True)
class RadarParams:
    carrier: float = 24e9
    slope: float = 8e12  # Hz/s
    sample_rate: float = 10e6
    n_samp: int = 32
    n_chirp: int = 16
    n_rx: int = 8
    chirp_period: float = 40e-6
    spacing: float = 0.5  # element pitch in wavelengths
    out_size: int = 64
    magnitude_average: bool = False

    @property
    def max_range(self) -> float:
        return C_LIGHT * self.sample_rate / (2.0 * self.slope)


@dataclass
class RadarCube:
    data: ComplexTensor  # [n_rx, n_chirp, n_samp]
    params: RadarParams


@dataclass
class RadarMaps:
    ra: ComplexTensor  # [angle, range]
    rv: ComplexTensor  # [velocity, range]


@dataclass
class SceneMap:
    """Rasterized bird's-eye view: bev channels are scatterer / tx / rx
    occupancy in {0,1}; height holds the per-cell max scatterer z in
    meters."""

    bev: np.ndarray  # [res, res, 3]
    height: np.ndarray  # [res, res, 1]


@dataclass
class Labels:
    beam_index: int
    distance_m: float
    aoa_rad: float


@dataclass
class MultimodalSample:
    index: int
    csi: ChannelSample | None
    radar: RadarMaps | None
    map: SceneMap | None
    labels: Labels

    def __post_init__(self):
        if self.csi is None and self.radar is None and self.map is None:
            raise SceneError("sample has no modality")

    @property
    def available(self) -> dict[str, bool]:
        return {
            "csi": self.csi is not None,
            "radar": self.radar is not None,
            "map": self.map is not None,
        }


# ---------------------------------------------------------------------------
# channel


def steering_vector(theta: float, n_elements: int, spacing: float = 0.5) -> ComplexTensor:
    """ULA response exp(j 2 pi spacing n sin(theta)), n = 0..N-1."""
    if n_elements < 1:
        raise SceneError("steering_vector: need at least one element")
    if not (-math.pi / 2 < theta <= math.pi / 2):
        raise SceneError("steering_vector: azimuth outside (-pi/2, pi/2]")
    n = np.arange(n_elements)
    return ComplexTensor(np.exp(2j * math.pi * spacing * n * math.sin(theta)))


def subcarrier_frequencies(f0: float, bw: float, n_sc: int) -> np.ndarray:
    if n_sc < 1:
        raise SceneError("need at least one subcarrier")
    if n_sc == 1:
        return np.array([f0])
    k = np.arange(n_sc)
    return f0 - bw / 2.0 + k * bw / (n_sc - 1)


def channel_response(
    paths: list[PathParams],
    f0: float,
    bw: float,
    n_sc: int,
    n_antennas: int,
    spacing: float = 0.5,
) -> ChannelSample:
    """Superpose path contributions on the subcarrier grid -> h [n_a, n_sc]."""
    if len(paths) == 0:
        raise SceneError("channel_response: no paths")
    freqs = subcarrier_frequencies(f0, bw, n_sc)
    h = np.zeros((n_antennas, n_sc), dtype=np.complex128)
    for p in paths:
        gain = p.beta * np.exp(1j * p.phi)
        sweep = np.exp(-2j * math.pi * freqs * p.tau)
        steer = steering_vector(p.theta, n_antennas, spacing).data
        h += gain * np.outer(steer, sweep)
    return ChannelSample(h=ComplexTensor(h), f0=f0, bw=bw)


def add_awgn(
    csi: ChannelSample, snr_db: float | None, rng: np.random.Generator
) -> ChannelSample:
    """Return a copy with complex white noise at the given SNR (None: clean)."""
    if snr_db is None:
        return ChannelSample(ComplexTensor(csi.h.data.copy()), csi.f0, csi.bw, csi.snr_db)
    h = csi.h.data
    p_sig = float(np.mean(np.abs(h) ** 2))
    p_noise = p_sig / (10.0 ** (snr_db / 10.0))
    scale = math.sqrt(p_noise / 2.0)
    noise = scale * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return ChannelSample(ComplexTensor(h + noise), csi.f0, csi.bw, snr_db=snr_db)


def beam_codebook(n_elements: int, n_beams: int) -> np.ndarray:
    """DFT beams w_b[n] = exp(j 2 pi n b / n_beams) / sqrt(n_elements)."""
    n = np.arange(n_elements)[None, :]
    b = np.arange(n_beams)[:, None]
    return np.exp(2j * math.pi * n * b / n_beams) / math.sqrt(n_elements)


# ---------------------------------------------------------------------------
# radar


def _radar_targets(scene: SceneSpec, params: RadarParams):
    """Per-scatterer (range, radial speed, azimuth, amplitude) at the radar,
    which is colocated with the receive array."""
    rx = np.asarray(scene.rx_position)
    out = []
    for s in scene.scatterers:
        delta = np.asarray(s.position) - rx
        r = float(np.linalg.norm(delta))
        if r >= params.max_range:
            raise SceneError(
                f"target range {r:.1f} m beyond unambiguous range {params.max_range:.1f} m"
            )
        theta = math.atan2(delta[1], delta[0])
        u = delta[:2] / max(np.linalg.norm(delta[:2]), 1e-12)
        v_r = float(np.dot(np.asarray(s.velocity), u))
        amp = s.reflectivity / max(r, 1.0) ** 2  # two-way spreading
        out.append((r, v_r, theta, amp))
    return out


def radar_cube(scene: SceneSpec, params: RadarParams) -> RadarCube:
    """Point-target FMCW cube [n_rx, n_chirp, n_samp], stop-and-hop."""
    m = np.arange(params.n_rx)[:, None, None]
    c = np.arange(params.n_chirp)[None, :, None]
    n = np.arange(params.n_samp)[None, None, :]
    cube = np.zeros((params.n_rx, params.n_chirp, params.n_samp), dtype=np.complex128)
    for r, v_r, theta, amp in _radar_targets(scene, params):
        f_beat = 2.0 * params.slope * r / C_LIGHT
        f_dopp = 2.0 * params.carrier * v_r / C_LIGHT
        phase = (
            -4.0 * math.pi * params.carrier * r / C_LIGHT
            + 2.0 * math.pi * f_beat * n / params.sample_rate
            + 2.0 * math.pi * f_dopp * c * params.chirp_period
            + 2.0 * math.pi * params.spacing * math.sin(theta) * m
        )
        cube = cube + amp * np.exp(1j * phase)
    return RadarCube(ComplexTensor(cube), params)


def range_angle_map(cube: RadarCube, out_size: int | None = None) -> ComplexTensor:
    """2D FFT over (rx, fast-time) per chirp, averaged across chirps.

    Output rows are angle bins, columns range bins; axes are zero-padded (or
    truncated) to out_size. Averaging is coherent unless the cube's params
    request magnitude averaging.
    """
    size = out_size or cube.params.out_size
    data = cube.data.data
    acc = np.zeros((size, size), dtype=np.complex128)
    for ci in range(data.shape[1]):
        s = np.fft.fft2(data[:, ci, :], s=(size, size))
        acc += np.abs(s) if cube.params.magnitude_average else s
    return ComplexTensor(acc / data.shape[1])


def range_velocity_map(cube: RadarCube, out_size: int | None = None) -> ComplexTensor:
    """2D FFT over (slow-time, fast-time) per rx element, averaged across rx."""
    size = out_size or cube.params.out_size
    data = cube.data.data
    acc = np.zeros((size, size), dtype=np.complex128)
    for mi in range(data.shape[0]):
        s = np.fft.fft2(data[mi, :, :], s=(size, size))
        acc += np.abs(s) if cube.params.magnitude_average else s
    return ComplexTensor(acc / data.shape[0])


# ---------------------------------------------------------------------------
# map rasterization


def rasterize_scene(
    scene: SceneSpec, resolution: int = 256, marker_radius: float = 3.0
) -> SceneMap:
    """Occupancy raster over the footprint; rows follow y, columns follow x,
    so a scatterer at (0, 0) lands in the center cell."""
    F = scene.footprint
    bev = np.zeros((resolution, resolution, 3))
    height = np.zeros((resolution, resolution, 1))

    def cell(x: float, y: float) -> tuple[int, int]:
        col = min(int((x + F) / (2 * F) * resolution), resolution - 1)
        row = min(int((y + F) / (2 * F) * resolution), resolution - 1)
        return row, col

    for s in scene.scatterers:
        row, col = cell(s.position[0], s.position[1])
        bev[row, col, 0] = 1.0
        height[row, col, 0] = max(height[row, col, 0], s.position[2])

    rad = max(int(round(marker_radius / (2 * F) * resolution)), 1)
    for pos, ch in ((scene.tx_position, 1), (scene.rx_position, 2)):
        row, col = cell(pos[0], pos[1])
        lo_r, hi_r = max(row - rad, 0), min(row + rad + 1, resolution)
        lo_c, hi_c = max(col - rad, 0), min(col + rad + 1, resolution)
        rr, cc = np.mgrid[lo_r:hi_r, lo_c:hi_c]
        disc = (rr - row) ** 2 + (cc - col) ** 2 <= rad * rad
        bev[lo_r:hi_r, lo_c:hi_c, ch][disc] = 1.0
    return SceneMap(bev=bev, height=height)


# ---------------------------------------------------------------------------
# scene sampling and labels


@dataclass(frozen=True)
class SynthConfig:
    # channel / array
    n_t: int = 16
    n_r: int = 1
    n_sc: int = 32
    f0: float = 3.5e9
    bw: float = 20e6
    spacing: float = 0.5
    # radar
    radar: RadarParams = field(default_factory=RadarParams)
    # map
    map_resolution: int = 256
    marker_radius: float = 3.0
    # scene distribution (front half-plane relative to the rx array)
    footprint: float = 100.0
    rx_position: tuple[float, float, float] = (-80.0, 0.0, 10.0)
    # scatterer bounds keep every target inside the radar's unambiguous range
    n_scatterers: tuple[int, int] = (3, 8)
    scatter_x: tuple[float, float] = (-40.0, 80.0)
    scatter_y: tuple[float, float] = (-70.0, 70.0)
    scatter_z: tuple[float, float] = (0.0, 25.0)
    reflectivity: tuple[float, float] = (0.3, 1.0)
    speed: tuple[float, float] = (-15.0, 15.0)
    tx_x: tuple[float, float] = (-40.0, 90.0)
    tx_y: tuple[float, float] = (-80.0, 80.0)
    tx_z: tuple[float, float] = (1.0, 3.0)
    include_los: bool = True
    los_amplitude: float = 2.0
    # labels
    n_beams: int = 16
    # availability fractions per modality
    availability: dict = field(
        default_factory=lambda: {"csi": 1.0, "radar": 1.0, "map": 1.0}
    )

    @property
    def n_antennas(self) -> int:
        return self.n_t * self.n_r


def sample_scene(cfg: SynthConfig, rng: np.random.Generator) -> SceneSpec:
    n = int(rng.integers(cfg.n_scatterers[0], cfg.n_scatterers[1] + 1))
    scatterers = tuple(
        Scatterer(
            position=(
                float(rng.uniform(*cfg.scatter_x)),
                float(rng.uniform(*cfg.scatter_y)),
                float(rng.uniform(*cfg.scatter_z)),
            ),
            reflectivity=float(rng.uniform(*cfg.reflectivity)),
            velocity=(float(rng.uniform(*cfg.speed)), float(rng.uniform(*cfg.speed))),
        )
        for _ in range(n)
    )
    tx = (
        float(rng.uniform(*cfg.tx_x)),
        float(rng.uniform(*cfg.tx_y)),
        float(rng.uniform(*cfg.tx_z)),
    )
    return SceneSpec(
        scatterers=scatterers,
        tx_position=tx,
        rx_position=cfg.rx_position,
        footprint=cfg.footprint,
    )


def scene_to_paths(
    scene: SceneSpec, cfg: SynthConfig, rng: np.random.Generator
) -> list[PathParams]:
    """One bounce path per scatterer (amplitude ~ reflectivity / (d1 d2)),
    plus an optional direct path; phases are drawn fresh per call."""
    tx = np.asarray(scene.tx_position)
    rx = np.asarray(scene.rx_position)
    paths = []
    if cfg.include_los:
        delta = tx - rx
        d = float(np.linalg.norm(delta))
        paths.append(
            PathParams(
                beta=cfg.los_amplitude / max(d, 1.0),
                tau=d / C_LIGHT,
                phi=float(rng.uniform(0.0, 2.0 * math.pi)),
                theta=math.atan2(delta[1], delta[0]),
            )
        )
    for s in scene.scatterers:
        sp = np.asarray(s.position)
        d1 = float(np.linalg.norm(sp - tx))
        d2 = float(np.linalg.norm(sp - rx))
        paths.append(
            PathParams(
                beta=s.reflectivity / max(d1 * d2, 1.0),
                tau=(d1 + d2) / C_LIGHT,
                phi=float(rng.uniform(0.0, 2.0 * math.pi)),
                theta=math.atan2(sp[1] - rx[1], sp[0] - rx[0]),
            )
        )
    return paths


def derive_labels(scene: SceneSpec, paths: list[PathParams], csi: ChannelSample, cfg: SynthConfig) -> Labels:
    dominant = max(paths, key=lambda p: p.beta)
    h_center = csi.h.data[:, csi.h.data.shape[1] // 2]
    book = beam_codebook(cfg.n_antennas, cfg.n_beams)
    gains = np.abs(book.conj() @ h_center)
    distance = float(np.linalg.norm(np.asarray(scene.tx_position) - np.asarray(scene.rx_position)))
    return Labels(
        beam_index=int(np.argmax(gains)),  # argmax keeps the lowest index on ties
        distance_m=distance,
        aoa_rad=dominant.theta,
    )


def synth_sample(cfg: SynthConfig, index: int, base_seed: int) -> tuple[MultimodalSample, SceneSpec]:
    """Generate one fully populated sample from substream base_seed ^ index."""
    rng = np.random.default_rng(base_seed ^ index)
    scene = sample_scene(cfg, rng)
    paths = scene_to_paths(scene, cfg, rng)
    csi = channel_response(paths, cfg.f0, cfg.bw, cfg.n_sc, cfg.n_antennas, cfg.spacing)
    cube = radar_cube(scene, cfg.radar)
    maps = RadarMaps(ra=range_angle_map(cube), rv=range_velocity_map(cube))
    smap = rasterize_scene(scene, cfg.map_resolution, cfg.marker_radius)
    labels = derive_labels(scene, paths, csi, cfg)
    return MultimodalSample(index=index, csi=csi, radar=maps, map=smap, labels=labels), scene


def _availability_plan(cfg: SynthConfig, n: int, base_seed: int) -> dict[str, np.ndarray]:
    """Exact-count availability: round(fraction * n) samples keep each
    modality, chosen by a seeded permutation per modality."""
    rng = np.random.default_rng((base_seed, 0x41564C))
    plan = {}
    for mod in ("csi", "radar", "map"):
        frac = float(cfg.availability.get(mod, 1.0))
        if not 0.0 <= frac <= 1.0:
            raise SceneError(f"availability fraction for {mod} outside [0, 1]")
        keep = np.zeros(n, dtype=bool)
        keep[rng.permutation(n)[: round(frac * n)]] = True
        plan[mod] = keep
    if not np.all(plan["csi"] | plan["radar"] | plan["map"]):
        raise SceneError("availability schedule leaves a sample with no modality")
    return plan


def synth_dataset(
    cfg: SynthConfig, n: int, seed: int, out_dir: str | Path | None = None
) -> tuple[list[MultimodalSample], dict]:
    """Generate n samples; optionally persist to out_dir (tensor files plus a
    manifest.json whose bytes are a pure function of cfg, n, seed)."""
    if n < 1:
        raise SceneError("dataset size must be >= 1")
    plan = _availability_plan(cfg, n, seed)
    samples = []
    entries = []
    for i in range(n):
        full, _scene = synth_sample(cfg, i, seed)
        sample = MultimodalSample(
            index=i,
            csi=full.csi if plan["csi"][i] else None,
            radar=full.radar if plan["radar"][i] else None,
            map=full.map if plan["map"][i] else None,
            labels=full.labels,
        )
        samples.append(sample)
        files = {}
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            if sample.csi is not None:
                files["csi"] = f"sample_{i:05d}_csi.mstn"
                write_mstn(out / files["csi"], sample.csi.h.data)
            if sample.radar is not None:
                files["radar"] = f"sample_{i:05d}_radar.mstn"
                stacked = np.stack([sample.radar.ra.data, sample.radar.rv.data])
                write_mstn(out / files["radar"], stacked)
            if sample.map is not None:
                files["map"] = f"sample_{i:05d}_map.mstn"
                packed = np.concatenate([sample.map.bev, sample.map.height], axis=-1)
                write_mstn(out / files["map"], packed)
        entries.append(
            {
                "index": i,
                "available": sample.available,
                "files": files,
                "labels": {
                    "beam_index": sample.labels.beam_index,
                    "distance_m": sample.labels.distance_m,
                    "aoa_rad": sample.labels.aoa_rad,
                },
            }
        )
    manifest = {
        "format": "misac-dataset",
        "version": 1,
        "seed": seed,
        "n": n,
        "config": _config_dict(cfg),
        "samples": entries,
    }
    if out_dir is not None:
        (Path(out_dir) / "manifest.json").write_text(canonical_json(manifest))
    return samples, manifest


def _config_dict(cfg: SynthConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return d


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(canonical_json(manifest).encode()).hexdigest()


def load_dataset(manifest_path: str | Path) -> tuple[list[MultimodalSample], dict]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "misac-dataset":
        raise SceneError("not a dataset manifest")
    root = path.parent
    cfg = manifest["config"]
    samples = []
    for e in manifest["samples"]:
        csi = radar = smap = None
        if "csi" in e["files"]:
            h = read_mstn(root / e["files"]["csi"])
            csi = ChannelSample(ComplexTensor(h), f0=cfg["f0"], bw=cfg["bw"])
        if "radar" in e["files"]:
            stacked = read_mstn(root / e["files"]["radar"])
            radar = RadarMaps(ra=ComplexTensor(stacked[0]), rv=ComplexTensor(stacked[1]))
        if "map" in e["files"]:
            packed = read_mstn(root / e["files"]["map"])
            smap = SceneMap(bev=packed[..., :3], height=packed[..., 3:])
        lab = e["labels"]
        samples.append(
            MultimodalSample(
                index=e["index"],
                csi=csi,
                radar=radar,
                map=smap,
                labels=Labels(lab["beam_index"], lab["distance_m"], lab["aoa_rad"]),
            )
        )
    return samples, manifest
