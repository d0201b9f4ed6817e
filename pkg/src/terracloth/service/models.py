"""Request and response bodies for the HTTP service.

Inputs and outputs are file paths on the machine the service runs on; the
service is a local processing daemon, not a data-upload API.
"""

from pydantic import BaseModel, ConfigDict


class _Request(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HealthResponse(BaseModel):
    status: str
    version: str


class MergeRequest(_Request):
    input: str  # pose-list file: "path tx ty tz qw qx qy qz" per line
    output: str
    binary: bool = True


class MergeResponse(BaseModel):
    points: int
    output: str


class DenoiseRequest(_Request):
    input: str
    output: str  # surviving points
    labels_output: str = ""  # optional: full cloud with outlier codes
    k: int = 20
    sigma: float = 1.2
    workers: int = 1


class DenoiseResponse(BaseModel):
    raw: int
    kept: int
    flagged: int
    output: str


class FilterRequest(_Request):
    input: str
    labels_output: str = ""  # full cloud with ground/non-ground codes
    ground_output: str = ""  # ground points only
    debug_cloth_output: str = ""  # settled cloth as a cloud, for inspection
    gr: float = 0.1
    dt: float = 0.65
    rigidness: int = 2
    steep_slope: bool = True
    threshold: float = 0.6
    max_iter: int = 500
    allow_fine_grid: bool = False
    binary: bool = True
    workers: int = 1


class FilterResponse(BaseModel):
    points: int
    ground: int
    non_ground: int
    iterations: int
    max_last_displacement: float


class DtmRequest(_Request):
    input: str  # ground cloud
    output: str  # ESRI ASCII grid
    mesh_output: str = ""
    cell: float = 0.5
    radius: float = 0.0  # 0 = automatic (3 cell sizes)
    binary: bool = True
    workers: int = 1


class DtmResponse(BaseModel):
    width: int
    height: int
    valid_cells: int
    nodata_cells: int
    mesh_vertices: int = 0
    mesh_faces: int = 0


class ProfileRequest(_Request):
    input: str  # ground cloud
    output: str = ""
    cut: list[float]  # x1, y1, x2, y2
    half_width: float = 2.0
    bin: float = 1.0


class ProfileResponse(BaseModel):
    distances: list[float]
    elevations: list[float]
    delta: float


class ReportRequest(_Request):
    input: str  # cloud with a classification column


class ReportResponse(BaseModel):
    raw: int
    outliers: int
    ground: int
    non_ground: int
    outlier_pct: float
    ground_pct: float
    non_ground_pct: float
    text: str


class SynthRequest(_Request):
    output: str
    config: dict = {}  # scene keys, same names as the key=value file
    seed: int | None = None  # overrides config seed when given
    binary: bool = True


class SynthResponse(BaseModel):
    points: int
    ground: int
    non_ground: int
    outliers: int
    output: str


class EvalRequest(_Request):
    truth: str  # labeled cloud with truth codes
    predicted: str  # labeled cloud with predicted codes


class EvalResponse(BaseModel):
    type1: float
    type2: float
    total: float
    ground_total: int
    non_ground_total: int


class PipelineRequest(_Request):
    config_path: str = ""
    overrides: dict = {}


class StageModel(BaseModel):
    name: str
    points_in: int
    points_out: int
    millis: float
    artifact: str = ""


class PipelineResponse(BaseModel):
    stages: list[StageModel]
    artifacts: dict
    raw_count: int
    denoised_count: int
    ground_count: int
    csf_iterations: int
    report: ReportResponse | None = None
    resolved_config: str
    log: list[str]
