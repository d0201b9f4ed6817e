"""End-to-end orchestration: merge, denoise, cloth filter, normals, DTM and
mesh, profile, report. One config object drives every stage; each stage is
timed, logged, and leaves an artifact on disk.

Config sources layer in a fixed precedence: explicit overrides (CLI flags)
beat config-file values, which beat the built-in defaults.
"""

import logging
import typing
from contextlib import contextmanager
from dataclasses import dataclass, fields, replace
from pathlib import Path
from time import perf_counter

import numpy as np

from .core import Label, PointCloud
from .csf import CsfParams, csf_filter
from .denoise import SorParams, apply_mask, statistical_outlier_removal
from .errors import InvalidSpec, OutOfRange, TerraclothError, TypeMismatch, UnknownKey
from .io import load_cloud, merge_from_pose_list, save_cloud
from .synth import Flat, GaussianHills, Ramp, Ravine, SceneSpec
from .terrain import (
    build_dtm,
    dtm_to_mesh,
    estimate_normals,
    extract_profile,
    report,
    save_esri_ascii,
    save_mesh_ply,
    save_profile,
)

logger = logging.getLogger("terracloth")


@dataclass
class PipelineConfig:
    """Flat bag of pipeline settings; every field round-trips as key=value."""

    input: str = ""
    output_dir: str = "out"
    sor_k: int = 20
    sor_sigma: float = 1.2
    csf_gr: float = 0.1
    csf_dt: float = 0.65
    csf_rigidness: int = 2
    csf_steep_slope: bool = True
    csf_threshold: float = 0.6
    csf_max_iter: int = 500
    allow_fine_grid: bool = False
    normals_k: int = 100
    dtm_cell: float = 0.5
    dtm_radius: float = 0.0  # 0 = automatic (3 cell sizes)
    profile_cut: str = ""  # "x1,y1,x2,y2"; empty disables the profile stage
    profile_halfwidth: float = 2.0
    profile_bin: float = 1.0
    seed: int = 0
    binary: bool = True
    workers: int = 1
    skip_denoise: bool = False
    skip_filter: bool = False
    skip_normals: bool = False
    skip_dtm: bool = False
    skip_mesh: bool = False
    skip_profile: bool = False
    skip_report: bool = False
    debug_cloth: bool = False

    def sor_params(self) -> SorParams:
        return SorParams(k=self.sor_k, sigma=self.sor_sigma)

    def csf_params(self) -> CsfParams:
        return CsfParams(
            grid_resolution=self.csf_gr,
            time_step=self.csf_dt,
            rigidness=self.csf_rigidness,
            steep_slope_fit=self.csf_steep_slope,
            class_threshold=self.csf_threshold,
            max_iterations=self.csf_max_iter,
            allow_fine_grid=self.allow_fine_grid,
        )

    def validate(self) -> "PipelineConfig":
        """Raise the first parameter error; returns self when clean."""
        self.sor_params()
        self.csf_params()
        if self.normals_k < 1:
            raise OutOfRange(f"normals_k must be >= 1, got {self.normals_k}")
        if not self.dtm_cell > 0:
            raise OutOfRange(f"dtm_cell must be > 0, got {self.dtm_cell}")
        if self.dtm_radius < 0:
            raise OutOfRange(f"dtm_radius must be >= 0, got {self.dtm_radius}")
        if self.profile_cut:
            parse_profile_cut(self.profile_cut)
            if not self.profile_halfwidth > 0:
                raise OutOfRange(f"profile_halfwidth must be > 0, got {self.profile_halfwidth}")
            if not self.profile_bin > 0:
                raise OutOfRange(f"profile_bin must be > 0, got {self.profile_bin}")
        if self.workers == 0:
            raise OutOfRange("workers must be nonzero (use -1 for all cores)")
        return self


_CONFIG_TYPES = typing.get_type_hints(PipelineConfig)
_CONFIG_FIELDS = tuple(f.name for f in fields(PipelineConfig))

_TRUE_WORDS = {"true", "yes", "on", "1"}
_FALSE_WORDS = {"false", "no", "off", "0"}


def _coerce(key: str, value, want: type):
    """Convert a raw config value (string or already typed) to ``want``."""
    if want is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in _TRUE_WORDS:
                return True
            if low in _FALSE_WORDS:
                return False
        raise TypeMismatch(f"key '{key}' expects a boolean, got {value!r}")
    if want is int:
        if isinstance(value, bool):
            raise TypeMismatch(f"key '{key}' expects an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value.strip())
            except ValueError:
                pass
        raise TypeMismatch(f"key '{key}' expects an integer, got {value!r}")
    if want is float:
        if isinstance(value, bool):
            raise TypeMismatch(f"key '{key}' expects a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value.strip())
            except ValueError:
                pass
        raise TypeMismatch(f"key '{key}' expects a number, got {value!r}")
    if isinstance(value, str):
        return value
    raise TypeMismatch(f"key '{key}' expects a string, got {value!r}")


def parse_keyvalues(text: str, source: str = "<config>") -> dict:
    """key=value lines to a dict; '#' starts a comment, blanks are skipped."""
    values = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidSpec(f"{source}:{ln}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def build_config(file_values=None, overrides=None) -> PipelineConfig:
    """Layer config sources over the defaults and validate the result.

    ``overrides`` (CLI flags) win over ``file_values``; unknown keys and
    untypable values are rejected by name.
    """
    merged = {}
    for source in (file_values, overrides):
        if not source:
            continue
        for key, value in source.items():
            if key not in _CONFIG_FIELDS:
                raise UnknownKey(f"unknown config key '{key}'")
            merged[key] = _coerce(key, value, _CONFIG_TYPES[key])
    return PipelineConfig(**merged).validate()


def load_config_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        from .errors import IoFailure

        raise IoFailure(f"cannot read config {p}: {exc}") from exc
    return parse_keyvalues(text, source=str(p))


def to_keyvalues(config: PipelineConfig) -> str:
    """Render the config as key=value lines that parse back to an equal config."""
    out = []
    for name in _CONFIG_FIELDS:
        value = getattr(config, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        out.append(f"{name}={value}")
    return "\n".join(out)


def parse_profile_cut(text: str):
    """'x1,y1,x2,y2' -> ((x1, y1), (x2, y2))."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise InvalidSpec(f"profile cut needs 'x1,y1,x2,y2', got {text!r}")
    try:
        x1, y1, x2, y2 = (float(p) for p in parts)
    except ValueError:
        raise InvalidSpec(f"profile cut has a non-numeric coordinate: {text!r}") from None
    return (x1, y1), (x2, y2)


# ---------------------------------------------------------------------------
# Scene-spec config (synth subcommand)

_SCENE_KEYS = {
    "ground": str,  # flat | ramp | ravine | gaussian_hills
    "extent_x": float,
    "extent_y": float,
    "z0": float,
    "slope": float,
    "depth": float,
    "width": float,
    "hill_count": int,
    "hill_amplitude": float,
    "hill_radius": float,
    "density": float,
    "tree_count": int,
    "trunk_min": float,
    "trunk_max": float,
    "crown_min": float,
    "crown_max": float,
    "crown_density": float,
    "outlier_count": int,
    "outlier_margin": float,
    "seed": int,
}


def parse_scene_config(values: dict) -> SceneSpec:
    """Assemble a SceneSpec from flat key=value settings.

    Keys that belong to a ground model other than the selected one are
    accepted and ignored, so one file can describe several variants.
    """
    typed = {}
    for key, value in values.items():
        if key not in _SCENE_KEYS:
            raise UnknownKey(f"unknown scene key '{key}'")
        typed[key] = _coerce(key, value, _SCENE_KEYS[key])

    kind = typed.get("ground", "flat")
    if kind == "flat":
        ground = Flat(typed.get("z0", 0.0))
    elif kind == "ramp":
        ground = Ramp(typed.get("slope", 0.1))
    elif kind == "ravine":
        ground = Ravine(typed.get("depth", 40.0), typed.get("width", 56.0))
    elif kind == "gaussian_hills":
        ground = GaussianHills(
            typed.get("hill_count", 5),
            typed.get("hill_amplitude", 8.0),
            typed.get("hill_radius", 12.0),
        )
    else:
        raise InvalidSpec(f"unknown ground model '{kind}'")

    defaults = SceneSpec()
    return SceneSpec(
        extent=(typed.get("extent_x", defaults.extent[0]), typed.get("extent_y", defaults.extent[1])),
        ground=ground,
        density=typed.get("density", defaults.density),
        tree_count=typed.get("tree_count", defaults.tree_count),
        trunk_height=(
            typed.get("trunk_min", defaults.trunk_height[0]),
            typed.get("trunk_max", defaults.trunk_height[1]),
        ),
        crown_radius=(
            typed.get("crown_min", defaults.crown_radius[0]),
            typed.get("crown_max", defaults.crown_radius[1]),
        ),
        crown_density=typed.get("crown_density", defaults.crown_density),
        outlier_count=typed.get("outlier_count", defaults.outlier_count),
        outlier_margin=typed.get("outlier_margin", defaults.outlier_margin),
        seed=typed.get("seed", defaults.seed),
    )


# ---------------------------------------------------------------------------
# Stage runner

@dataclass
class StageRecord:
    name: str
    points_in: int
    points_out: int
    millis: float
    artifact: str = ""


@dataclass
class PipelineResult:
    config: PipelineConfig
    stages: list
    artifacts: dict
    raw_count: int
    denoised_count: int
    ground_count: int
    csf_iterations: int
    report: object  # ClassificationReport when the report stage ran


@contextmanager
def _named_stage(name: str):
    """Prefix any pipeline error with the stage it came from."""
    try:
        yield
    except TerraclothError as exc:
        raise type(exc)(f"{name}: {exc}") from exc


class _Recorder:
    def __init__(self, log):
        self.log = log
        self.stages = []

    def done(self, name, t0, points_in, points_out, artifact=""):
        ms = (perf_counter() - t0) * 1000.0
        self.stages.append(StageRecord(name, points_in, points_out, ms, artifact))
        self.log(f"stage={name} in={points_in} out={points_out} ms={ms:.1f}")

    def skipped(self, name, reason="skipped"):
        self.log(f"stage={name} {reason}")


def run_pipeline(config: PipelineConfig, log=None) -> PipelineResult:
    """Run every enabled stage in order, writing artifacts to ``output_dir``.

    Stage errors carry the stage name; artifacts already written stay on
    disk. Re-running with identical config and inputs rewrites identical
    bytes.
    """
    log = log or logger.info
    config.validate()
    log("resolved config:\n" + to_keyvalues(config))
    if not config.input:
        raise InvalidSpec("pipeline input path is required")

    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    rec = _Recorder(log)
    artifacts = {}
    src = Path(config.input)

    t0 = perf_counter()
    if src.suffix.lower() == ".txt":
        with _named_stage("merge"):
            cloud = merge_from_pose_list(src)
            merged_path = outdir / "merged.ply"
            save_cloud(cloud, merged_path, binary=config.binary)
        artifacts["merged"] = str(merged_path)
        rec.done("merge", t0, len(cloud), len(cloud), str(merged_path))
    else:
        with _named_stage("load"):
            cloud = load_cloud(src)
        rec.done("load", t0, len(cloud), len(cloud))

    raw_count = len(cloud)
    labels_full = np.full(raw_count, int(Label.UNLABELED), dtype=np.uint8)

    t0 = perf_counter()
    if config.skip_denoise:
        kept, index_map = cloud, np.arange(raw_count)
        rec.skipped("denoise")
    else:
        with _named_stage("denoise"):
            mask = statistical_outlier_removal(cloud, config.sor_params(), workers=config.workers)
            kept, index_map = apply_mask(cloud, mask, keep=(Label.UNLABELED,))
            labels_full[mask == int(Label.OUTLIER)] = int(Label.OUTLIER)
            denoised_path = outdir / "denoised.ply"
            save_cloud(kept, denoised_path, binary=config.binary)
        artifacts["denoised"] = str(denoised_path)
        rec.done("denoise", t0, raw_count, len(kept), str(denoised_path))

    t0 = perf_counter()
    csf_iterations = 0
    if config.skip_filter:
        labels_full[index_map] = int(Label.GROUND)
        ground = kept
        rec.skipped("filter")
    else:
        with _named_stage("filter"):
            result = csf_filter(kept, config.csf_params(), workers=config.workers)
            csf_iterations = result.iterations_used
            labels_full[index_map] = result.labels
            ground, _ = apply_mask(kept, result.labels, keep=(Label.GROUND,))
            labels_path = outdir / "labels.ply"
            save_cloud(cloud, labels_path, binary=config.binary, labels=labels_full)
            ground_path = outdir / "ground.ply"
            save_cloud(ground, ground_path, binary=config.binary)
            if config.debug_cloth:
                cloth_path = outdir / "cloth.ply"
                save_cloud(result.cloth.to_point_cloud(), cloth_path, binary=config.binary)
                artifacts["cloth"] = str(cloth_path)
        artifacts["labels"] = str(labels_path)
        artifacts["ground"] = str(ground_path)
        rec.done("filter", t0, len(kept), len(ground), str(ground_path))

    t0 = perf_counter()
    if config.skip_normals:
        rec.skipped("normals")
    else:
        with _named_stage("normals"):
            normals = estimate_normals(ground, k=config.normals_k, workers=config.workers)
            normals_path = outdir / "normals.txt"
            np.savetxt(normals_path, np.hstack([ground.xyz, normals]), fmt="%.6g")
        artifacts["normals"] = str(normals_path)
        rec.done("normals", t0, len(ground), len(ground), str(normals_path))

    raster = None
    t0 = perf_counter()
    if config.skip_dtm:
        rec.skipped("dtm")
    else:
        with _named_stage("dtm"):
            raster = build_dtm(
                ground,
                config.dtm_cell,
                search_radius=config.dtm_radius or None,
                workers=config.workers,
            )
            dtm_path = outdir / "dtm.asc"
            save_esri_ascii(raster, dtm_path)
        artifacts["dtm"] = str(dtm_path)
        valid = int((~raster.nodata_mask).sum())
        rec.done("dtm", t0, len(ground), valid, str(dtm_path))

    t0 = perf_counter()
    if config.skip_mesh or raster is None:
        rec.skipped("mesh", "skipped" if config.skip_mesh else "skipped (no dtm)")
    else:
        with _named_stage("mesh"):
            mesh = dtm_to_mesh(raster)
            mesh_path = outdir / "mesh.ply"
            save_mesh_ply(mesh, mesh_path, binary=config.binary)
        artifacts["mesh"] = str(mesh_path)
        rec.done("mesh", t0, len(mesh.vertices), len(mesh.faces), str(mesh_path))

    t0 = perf_counter()
    if config.skip_profile or not config.profile_cut:
        rec.skipped("profile", "skipped" if config.skip_profile else "skipped (no cut)")
    else:
        with _named_stage("profile"):
            cut = parse_profile_cut(config.profile_cut)
            prof = extract_profile(
                ground, cut, half_width=config.profile_halfwidth, bin_size=config.profile_bin
            )
            profile_path = outdir / "profile.txt"
            save_profile(prof, profile_path)
        artifacts["profile"] = str(profile_path)
        rec.done("profile", t0, len(ground), len(prof.distances), str(profile_path))

    class_report = None
    t0 = perf_counter()
    if config.skip_report:
        rec.skipped("report")
    else:
        with _named_stage("report"):
            class_report = report(raw_count, labels_full)
            report_path = outdir / "report.txt"
            report_path.write_text(class_report.as_text(), encoding="utf-8")
        artifacts["report"] = str(report_path)
        rec.done("report", t0, raw_count, raw_count, str(report_path))

    return PipelineResult(
        config=replace(config),
        stages=rec.stages,
        artifacts=artifacts,
        raw_count=raw_count,
        denoised_count=len(kept),
        ground_count=len(ground),
        csf_iterations=csf_iterations,
        report=class_report,
    )
