"""HTTP front end: one endpoint per pipeline stage plus the full pipeline.

Every domain error is returned as a structured body
``{"error": {"category", "type", "message"}}`` with a status code per
category, so clients can map failures without parsing messages.
"""

import dataclasses
import logging

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__
from ..core import Label
from ..csf import CsfParams, csf_filter
from ..denoise import SorParams, apply_mask, statistical_outlier_removal
from ..errors import InvalidSpec, TerraclothError
from ..io import load_cloud, merge_from_pose_list, save_cloud
from ..pipeline import (
    build_config,
    load_config_file,
    parse_scene_config,
    run_pipeline,
    to_keyvalues,
)
from ..synth import SceneTruth, evaluate, generate_scene
from ..terrain import (
    build_dtm,
    dtm_to_mesh,
    extract_profile,
    report,
    save_esri_ascii,
    save_mesh_ply,
    save_profile,
)
from . import models

logger = logging.getLogger("terracloth")

_STATUS_BY_CATEGORY = {"config": 400, "io": 404, "algorithm": 422}


def _report_body(rep) -> models.ReportResponse:
    return models.ReportResponse(
        raw=rep.raw_count,
        outliers=rep.outlier_count,
        ground=rep.ground_count,
        non_ground=rep.non_ground_count,
        outlier_pct=rep.percent(rep.outlier_count),
        ground_pct=rep.percent(rep.ground_count),
        non_ground_pct=rep.percent(rep.non_ground_count),
        text=rep.as_text(),
    )


def _labeled_cloud(path, role):
    cloud = load_cloud(path)
    if cloud.classification is None:
        raise InvalidSpec(f"{role} cloud {path} has no classification column")
    return cloud


def create_app() -> FastAPI:
    app = FastAPI(title="terracloth", version=__version__)

    @app.exception_handler(TerraclothError)
    async def domain_error(request, exc: TerraclothError):
        return JSONResponse(
            status_code=_STATUS_BY_CATEGORY.get(exc.category, 422),
            content={
                "error": {
                    "category": exc.category,
                    "type": type(exc).__name__,
                    "message": str(exc),
                }
            },
        )

    @app.get("/health", response_model=models.HealthResponse)
    def health():
        return models.HealthResponse(status="ok", version=__version__)

    @app.post("/v1/merge", response_model=models.MergeResponse)
    def merge(req: models.MergeRequest):
        cloud = merge_from_pose_list(req.input)
        save_cloud(cloud, req.output, binary=req.binary)
        return models.MergeResponse(points=len(cloud), output=req.output)

    @app.post("/v1/denoise", response_model=models.DenoiseResponse)
    def denoise(req: models.DenoiseRequest):
        cloud = load_cloud(req.input)
        mask = statistical_outlier_removal(
            cloud, SorParams(k=req.k, sigma=req.sigma), workers=req.workers
        )
        kept, _ = apply_mask(cloud, mask, keep=(Label.UNLABELED,))
        save_cloud(kept, req.output, binary=True)
        if req.labels_output:
            save_cloud(cloud, req.labels_output, binary=True, labels=mask)
        flagged = int((mask == int(Label.OUTLIER)).sum())
        return models.DenoiseResponse(
            raw=len(cloud), kept=len(kept), flagged=flagged, output=req.output
        )

    @app.post("/v1/filter", response_model=models.FilterResponse)
    def filter_ground(req: models.FilterRequest):
        cloud = load_cloud(req.input)
        params = CsfParams(
            grid_resolution=req.gr,
            time_step=req.dt,
            rigidness=req.rigidness,
            steep_slope_fit=req.steep_slope,
            class_threshold=req.threshold,
            max_iterations=req.max_iter,
            allow_fine_grid=req.allow_fine_grid,
        )
        result = csf_filter(cloud, params, workers=req.workers)
        if req.labels_output:
            save_cloud(cloud, req.labels_output, binary=req.binary, labels=result.labels)
        if req.ground_output:
            ground, _ = apply_mask(cloud, result.labels, keep=(Label.GROUND,))
            save_cloud(ground, req.ground_output, binary=req.binary)
        if req.debug_cloth_output:
            save_cloud(result.cloth.to_point_cloud(), req.debug_cloth_output, binary=req.binary)
        n_ground = int((result.labels == int(Label.GROUND)).sum())
        return models.FilterResponse(
            points=len(cloud),
            ground=n_ground,
            non_ground=len(cloud) - n_ground,
            iterations=result.iterations_used,
            max_last_displacement=result.max_last_displacement,
        )

    @app.post("/v1/dtm", response_model=models.DtmResponse)
    def dtm(req: models.DtmRequest):
        ground = load_cloud(req.input)
        raster = build_dtm(
            ground, req.cell, search_radius=req.radius or None, workers=req.workers
        )
        save_esri_ascii(raster, req.output)
        body = models.DtmResponse(
            width=raster.width,
            height=raster.height,
            valid_cells=int((~raster.nodata_mask).sum()),
            nodata_cells=int(raster.nodata_mask.sum()),
        )
        if req.mesh_output:
            mesh = dtm_to_mesh(raster)
            save_mesh_ply(mesh, req.mesh_output, binary=req.binary)
            body.mesh_vertices = len(mesh.vertices)
            body.mesh_faces = len(mesh.faces)
        return body

    @app.post("/v1/profile", response_model=models.ProfileResponse)
    def profile(req: models.ProfileRequest):
        if len(req.cut) != 4:
            raise InvalidSpec(f"profile cut needs 4 numbers, got {len(req.cut)}")
        ground = load_cloud(req.input)
        prof = extract_profile(
            ground,
            [(req.cut[0], req.cut[1]), (req.cut[2], req.cut[3])],
            half_width=req.half_width,
            bin_size=req.bin,
        )
        if req.output:
            save_profile(prof, req.output)
        return models.ProfileResponse(
            distances=prof.distances.tolist(),
            elevations=prof.elevations.tolist(),
            delta=prof.delta,
        )

    @app.post("/v1/report", response_model=models.ReportResponse)
    def class_report(req: models.ReportRequest):
        cloud = _labeled_cloud(req.input, "input")
        return _report_body(report(len(cloud), cloud.classification))

    @app.post("/v1/synth", response_model=models.SynthResponse)
    def synth(req: models.SynthRequest):
        spec = parse_scene_config(req.config)
        if req.seed is not None:
            spec = dataclasses.replace(spec, seed=req.seed)
        scene = generate_scene(spec)
        save_cloud(scene.cloud, req.output, binary=req.binary, labels=scene.truth)
        return models.SynthResponse(
            points=len(scene.cloud),
            ground=scene.count(Label.GROUND),
            non_ground=scene.count(Label.NON_GROUND),
            outliers=scene.count(Label.OUTLIER),
            output=req.output,
        )

    @app.post("/v1/eval", response_model=models.EvalResponse)
    def eval_labels(req: models.EvalRequest):
        truth_cloud = _labeled_cloud(req.truth, "truth")
        predicted = _labeled_cloud(req.predicted, "predicted")
        metrics = evaluate(
            SceneTruth(cloud=truth_cloud, truth=truth_cloud.classification),
            predicted.classification,
        )
        return models.EvalResponse(
            type1=metrics.type1,
            type2=metrics.type2,
            total=metrics.total,
            ground_total=metrics.ground_total,
            non_ground_total=metrics.non_ground_total,
        )

    @app.post("/v1/pipeline", response_model=models.PipelineResponse)
    def pipeline(req: models.PipelineRequest):
        file_values = load_config_file(req.config_path) if req.config_path else None
        config = build_config(file_values, req.overrides)
        lines = []

        def log(msg):
            lines.append(msg)
            logger.info(msg)

        result = run_pipeline(config, log=log)
        return models.PipelineResponse(
            stages=[models.StageModel(**dataclasses.asdict(s)) for s in result.stages],
            artifacts=result.artifacts,
            raw_count=result.raw_count,
            denoised_count=result.denoised_count,
            ground_count=result.ground_count,
            csf_iterations=result.csf_iterations,
            report=_report_body(result.report) if result.report else None,
            resolved_config=to_keyvalues(result.config),
            log=lines,
        )

    return app
