"""Synthetic moving-small-target infrared sequences.

Coordinates: target centres live in pixel-index space (pixel ``j`` has its
centre at ``j``); boxes are written in pixel-edge space, so a target centred
on pixel 32 with a 7 px box gets ``x1 = 29, x2 = 36``.

Randomness comes from numpy's counter-based Philox generator, keyed by the
scene seed and a ``(frame, target)`` spawn key so any single frame can be
regenerated in isolation.

On-disk layout::

    <root>/manifest.txt               JSON: sequences, lengths, generating specs
    <root>/<seq_id>/ann.txt           seq_id,frame,target_id,x1,y1,x2,y2,visible
    <root>/<seq_id>/frames/%06d.png   16-bit grayscale
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

MAX_LEVEL = 65535
SIGMA_RANGE = (0.5, 2.0)
SNR_FLOOR = 3.0
ANN_HEADER = "# seq_id,frame,target_id,x1,y1,x2,y2,visible"


class SceneError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class TargetSpec:
    x0: float
    y0: float
    vx: float = 0.0
    vy: float = 0.0
    ax: float = 0.0  # curvature, px / frame^2
    ay: float = 0.0
    sigma: float = 1.0
    contrast: float = 0.3

    def position(self, t: int) -> tuple[float, float]:
        return (
            self.x0 + self.vx * t + 0.5 * self.ax * t * t,
            self.y0 + self.vy * t + 0.5 * self.ay * t * t,
        )


@dataclass
class DimEvent:
    target_id: int
    start: int  # first dimmed frame
    stop: int  # one past the last dimmed frame
    multiplier: float = 0.0

    def covers(self, target_id: int, t: int) -> bool:
        return target_id == self.target_id and self.start <= t < self.stop


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    length: int = 40
    targets: list[TargetSpec] = field(default_factory=list)
    background_level: float = 0.2
    noise_amp: float = 0.02
    noise_smooth: float = 1.0
    gradient: tuple[float, float] = (0.0, 0.0)  # intensity change across the full width / height
    dim_events: list[DimEvent] = field(default_factory=list)
    seed: int = 0
    snr_floor: float = SNR_FLOOR

    def validate(self) -> None:
        if self.height < 1 or self.width < 1 or self.length < 1:
            raise SceneError("frame size and sequence length must be positive")
        for k, tg in enumerate(self.targets):
            if not SIGMA_RANGE[0] <= tg.sigma <= SIGMA_RANGE[1]:
                raise SceneError(f"target {k}: sigma {tg.sigma} outside {SIGMA_RANGE}")
            if tg.contrast < 0:
                raise SceneError(f"target {k}: negative contrast")
        for ev in self.dim_events:
            if not 0.0 <= ev.multiplier <= 1.0:
                raise SceneError(f"dim multiplier {ev.multiplier} outside [0, 1]")
            if not 0 <= ev.target_id < len(self.targets):
                raise SceneError(f"dim event refers to unknown target {ev.target_id}")
            if ev.start >= ev.stop:
                raise SceneError(f"empty dim span [{ev.start}, {ev.stop})")
        if self.noise_amp < 0:
            raise SceneError("noise amplitude must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gradient"] = list(self.gradient)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["targets"] = [TargetSpec(**t) for t in d.get("targets", [])]
        d["dim_events"] = [DimEvent(**e) for e in d.get("dim_events", [])]
        d["gradient"] = tuple(d.get("gradient", (0.0, 0.0)))
        return cls(**d)


@dataclass
class Annotation:
    target_id: int
    box: tuple[float, float, float, float]
    visible: bool = True


@dataclass
class Sequence:
    seq_id: str
    frames: np.ndarray  # (T, H, W) float64, quantised to 16-bit levels
    annotations: list[list[Annotation]]
    spec: SceneSpec | None = None

    def __len__(self) -> int:
        return self.frames.shape[0]

    def boxes(self, t: int) -> list[tuple[float, float, float, float]]:
        return [a.box for a in self.annotations[t]]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sequence):
            return NotImplemented
        return (
            self.seq_id == other.seq_id
            and self.frames.shape == other.frames.shape
            and bool(np.array_equal(self.frames, other.frames))
            and self.annotations == other.annotations
            and self.spec == other.spec
        )


def stream(seed: int, frame: int = -1, target: int = -1) -> np.random.Generator:
    """Philox generator for one (frame, target) slot of a scene."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(frame + 1, target + 1))
    return np.random.Generator(np.random.Philox(ss))


def box_side(sigma: float) -> int:
    return max(7, int(round(6 * sigma)))


def target_box(cx: float, cy: float, sigma: float, width: int, height: int) -> tuple[float, float, float, float]:
    half = box_side(sigma) / 2
    ex, ey = cx + 0.5, cy + 0.5
    return (
        float(max(0.0, ex - half)),
        float(max(0.0, ey - half)),
        float(min(float(width), ex + half)),
        float(min(float(height), ey + half)),
    )


def _inside(cx: float, cy: float, sigma: float, width: int, height: int) -> bool:
    m = 2 * sigma
    return m <= cx <= width - 1 - m and m <= cy <= height - 1 - m


def render_background(spec: SceneSpec, t: int) -> np.ndarray:
    h, w = spec.height, spec.width
    bg = np.full((h, w), spec.background_level, dtype=np.float64)
    gx, gy = spec.gradient
    if gx or gy:
        yy, xx = np.mgrid[0:h, 0:w]
        bg += gx * xx / max(w - 1, 1) + gy * yy / max(h - 1, 1)
    if spec.noise_amp > 0:
        raw = stream(spec.seed, frame=t).standard_normal((h, w))
        sm = gaussian_filter(raw, spec.noise_smooth, mode="reflect") if spec.noise_smooth > 0 else raw
        sd = sm.std()
        if sd > 0:
            bg += spec.noise_amp * sm / sd
    return bg


def _blob(cx: float, cy: float, sigma: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))


def local_snr(background: np.ndarray, amplitude: float, cx: float, cy: float, radius: int = 7) -> float:
    h, w = background.shape
    x, y = int(round(cx)), int(round(cy))
    win = background[max(0, y - radius) : y + radius + 1, max(0, x - radius) : x + radius + 1]
    sd = float(win.std())
    return math.inf if sd == 0 else amplitude / sd


def generate_sequence(spec: SceneSpec, seq_id: str = "seq000") -> Sequence:
    """Render a spec into quantised frames plus per-frame annotations."""
    spec.validate()
    h, w = spec.height, spec.width
    frames = np.empty((spec.length, h, w), dtype=np.float64)
    annotations: list[list[Annotation]] = []
    for t in range(spec.length):
        bg = render_background(spec, t)
        img = bg.copy()
        anns = []
        for k, tg in enumerate(spec.targets):
            cx, cy = tg.position(t)
            if not _inside(cx, cy, tg.sigma, w, h):
                continue  # exited
            mult = 1.0
            dimmed = False
            for ev in spec.dim_events:
                if ev.covers(k, t):
                    mult *= ev.multiplier
                    dimmed = True
            blob = _blob(cx, cy, tg.sigma, h, w)
            amp = tg.contrast * mult
            img += amp * blob
            if not dimmed:
                snr = local_snr(bg, tg.contrast * float(blob.max()), cx, cy)
                if snr < spec.snr_floor:
                    raise SceneError(
                        f"target {k} frame {t}: local SNR {snr:.2f} below floor {spec.snr_floor}"
                    )
            anns.append(Annotation(k, target_box(cx, cy, tg.sigma, w, h), True))
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * MAX_LEVEL) / MAX_LEVEL
        annotations.append(anns)
    return Sequence(seq_id, frames, annotations, spec)


def random_scene(
    seed: int,
    height: int = 64,
    width: int = 64,
    length: int = 40,
    n_targets: int = 1,
    speed: tuple[float, float] = (0.5, 1.5),
    sigma: tuple[float, float] = (0.8, 1.2),
    contrast: tuple[float, float] = (0.3, 0.5),
    noise_amp: float = 0.02,
    dim_span: int = 0,
    dim_every: int = 8,
    dim_offset: int = 2,
) -> SceneSpec:
    """Draw a scene whose targets stay inside the frame for the whole sequence.

    With ``dim_span > 0`` every target gets fully dimmed spans of that length
    starting at ``dim_offset``, then every ``dim_every`` frames.
    """
    targets = []
    for k in range(n_targets):
        rng = stream(seed, target=k)
        for _ in range(1000):
            s = float(rng.uniform(*sigma))
            sp = float(rng.uniform(*speed))
            ang = float(rng.uniform(0, 2 * math.pi))
            m = 2 * s + 4
            x0 = float(rng.uniform(m, width - 1 - m))
            y0 = float(rng.uniform(m, height - 1 - m))
            tg = TargetSpec(x0, y0, sp * math.cos(ang), sp * math.sin(ang), 0.0, 0.0, s,
                            float(rng.uniform(*contrast)))
            end = tg.position(length - 1)
            if _inside(end[0], end[1], s + 2, width, height):
                break
        else:
            raise SceneError("could not place a target that stays in frame")
        targets.append(tg)
    g = stream(seed).uniform(-0.1, 0.1, size=2)
    events = []
    if dim_span > 0:
        for k in range(n_targets):
            for start in range(dim_offset, length - dim_span + 1, dim_every):
                events.append(DimEvent(k, start, start + dim_span, 0.0))
    return SceneSpec(
        height=height,
        width=width,
        length=length,
        targets=targets,
        noise_amp=noise_amp,
        gradient=(float(g[0]), float(g[1])),
        dim_events=events,
        seed=seed,
    )


def sequence_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=base_seed, spawn_key=(index,)).generate_state(1)[0])


def make_sequences(n_seqs: int, base_seed: int, **scene_kwargs) -> list[Sequence]:
    return [
        generate_sequence(random_scene(sequence_seed(base_seed, i), **scene_kwargs), f"seq{i:03d}")
        for i in range(n_seqs)
    ]


# -- dataset I/O ---------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(root: str | Path, sequences: list[Sequence]) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for seq in sequences:
        sdir = root / seq.seq_id
        fdir = sdir / "frames"
        fdir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(seq.frames):
            levels = np.round(frame * MAX_LEVEL).astype(np.uint16)
            Image.fromarray(levels).save(fdir / f"{t:06d}.png")
        lines = [ANN_HEADER]
        for t, anns in enumerate(seq.annotations):
            for a in anns:
                lines.append(
                    ",".join([seq.seq_id, str(t), str(a.target_id), *(_fmt(v) for v in a.box), str(int(a.visible))])
                )
        (sdir / "ann.txt").write_text("\n".join(lines) + "\n")
        entries.append(
            {
                "seq_id": seq.seq_id,
                "length": len(seq),
                "height": int(seq.frames.shape[1]),
                "width": int(seq.frames.shape[2]),
                "spec": seq.spec.to_dict() if seq.spec is not None else None,
            }
        )
    manifest = {"format": "bird-synth", "version": 1, "sequences": entries}
    (root / "manifest.txt").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def read_annotations(path: Path, seq_id: str, length: int) -> list[list[Annotation]]:
    anns: list[list[Annotation]] = [[] for _ in range(length)]
    text = path.read_text()
    if text and not text.endswith("\n"):
        raise DatasetFormatError(f"{path}:{text.count(chr(10)) + 1}: truncated line (no newline)")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise DatasetFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            sid, t, k = parts[0], int(parts[1]), int(parts[2])
            box = tuple(float(v) for v in parts[3:7])
            vis = {"0": False, "1": True}[parts[7].strip()]
        except (ValueError, KeyError) as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
        if sid != seq_id:
            raise DatasetFormatError(f"{path}:{lineno}: sequence id {sid!r} != {seq_id!r}")
        if not 0 <= t < length:
            raise DatasetFormatError(f"{path}:{lineno}: frame {t} outside [0, {length})")
        anns[t].append(Annotation(k, box, vis))
    return anns


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.txt"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{path}: missing manifest") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if "sequences" not in manifest:
        raise DatasetFormatError(f"{path}:1: no 'sequences' entry")
    return manifest


def validate_dataset(root: str | Path) -> dict:
    """Check that every manifest entry has the advertised number of frames on disk."""
    root = Path(root)
    manifest = read_manifest(root)
    for e in manifest["sequences"]:
        fdir = root / e["seq_id"] / "frames"
        n = len(list(fdir.glob("*.png")))
        if n != e["length"]:
            raise DatasetFormatError(
                f"{fdir}: manifest lists {e['length']} frames, found {n} on disk"
            )
        if not (root / e["seq_id"] / "ann.txt").exists():
            raise DatasetFormatError(f"{root / e['seq_id'] / 'ann.txt'}: missing annotation file")
    return manifest


def read_dataset(root: str | Path) -> list[Sequence]:
    root = Path(root)
    manifest = validate_dataset(root)
    out = []
    for e in manifest["sequences"]:
        sid, n = e["seq_id"], e["length"]
        frames = np.empty((n, e["height"], e["width"]), dtype=np.float64)
        for t in range(n):
            p = root / sid / "frames" / f"{t:06d}.png"
            try:
                arr = np.array(Image.open(p))
            except (OSError, ValueError) as exc:
                raise DatasetFormatError(f"{p}: unreadable frame ({exc})") from exc
            if arr.shape != frames.shape[1:]:
                raise DatasetFormatError(f"{p}: shape {arr.shape} != {frames.shape[1:]}")
            frames[t] = arr.astype(np.float64) / MAX_LEVEL
        anns = read_annotations(root / sid / "ann.txt", sid, n)
        spec = SceneSpec.from_dict(e["spec"]) if e.get("spec") else None
        out.append(Sequence(sid, frames, anns, spec))
    return out
