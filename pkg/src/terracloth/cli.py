"""Command line front end.

Every subcommand is a thin client of the HTTP service: it builds a request,
posts it, and renders the response. By default the request runs against an
in-process service instance, so no daemon is needed; ``--server URL`` sends
the same request to a running one instead. Exit codes: 0 success, 2 bad
configuration, 3 I/O failure, 4 algorithm failure.
"""

import argparse
import asyncio
import sys
from pathlib import Path

import httpx

_EXIT_BY_CATEGORY = {"config": 2, "io": 3, "algorithm": 4}


def _bool_word(text):
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _cut_numbers(text):
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected x1,y1,x2,y2, got {text!r}")
    try:
        return [float(v) for v in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"non-numeric coordinate in {text!r}") from None


def _add_output_dir(sp):
    sp.add_argument("--output-dir", default="out", help="directory for artifacts")


def _add_sor_flags(sp):
    sp.add_argument("--sor-k", type=int, default=None, help="neighbor count (default 20)")
    sp.add_argument("--sor-sigma", type=float, default=None, help="std multiplier (default 1.2)")


def _add_csf_flags(sp):
    sp.add_argument("--csf-gr", type=float, default=None, help="cloth grid resolution, m (default 0.1)")
    sp.add_argument("--csf-dt", type=float, default=None, help="simulation time step (default 0.65)")
    sp.add_argument("--csf-rigidness", type=int, default=None, help="constraint passes, 1-3 (default 2)")
    sp.add_argument(
        "--csf-steep-slope", type=_bool_word, default=None, metavar="{true,false}",
        help="steep-slope post-processing (default true)",
    )
    sp.add_argument("--csf-threshold", type=float, default=None, help="cloud-to-cloth ground threshold, m (default 0.6)")
    sp.add_argument("--csf-max-iter", type=int, default=None, help="iteration budget (default 500)")
    sp.add_argument("--allow-fine-grid", action="store_true", default=None, help="permit grid resolution below 0.1 m")
    sp.add_argument("--debug-cloth", action="store_true", default=None, help="also write the settled cloth as a cloud")


def build_parser():
    p = argparse.ArgumentParser(
        prog="terracloth",
        description="Bare-earth extraction from airborne LiDAR point clouds.",
    )
    p.add_argument("--server", default="", help="service base URL; default runs in process")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("merge", help="merge posed scans from a pose-list file")
    sp.add_argument("--input", required=True, help="pose list: 'path tx ty tz qw qx qy qz' per line")
    _add_output_dir(sp)

    sp = sub.add_parser("denoise", help="statistical outlier removal")
    sp.add_argument("--input", required=True)
    _add_output_dir(sp)
    _add_sor_flags(sp)

    sp = sub.add_parser("filter", help="cloth-simulation ground filtering")
    sp.add_argument("--input", required=True)
    _add_output_dir(sp)
    _add_csf_flags(sp)

    sp = sub.add_parser("dtm", help="rasterize ground points to a terrain grid + mesh")
    sp.add_argument("--input", required=True, help="ground cloud")
    _add_output_dir(sp)
    sp.add_argument("--dtm-cell", type=float, default=0.5, help="cell size, m")
    sp.add_argument("--dtm-radius", type=float, default=0.0, help="search radius, m (0 = 3 cells)")

    sp = sub.add_parser("profile", help="terrain cross-section along a cut line")
    sp.add_argument("--input", required=True, help="ground cloud")
    _add_output_dir(sp)
    sp.add_argument("--profile-cut", required=True, type=_cut_numbers, metavar="x1,y1,x2,y2")
    sp.add_argument("--profile-halfwidth", type=float, default=2.0)
    sp.add_argument("--profile-bin", type=float, default=1.0)

    sp = sub.add_parser("report", help="classification report for a labeled cloud")
    sp.add_argument("--input", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scene with truth labels")
    _add_output_dir(sp)
    sp.add_argument("--config", default="", help="scene key=value file")
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("eval", help="score predicted labels against truth labels")
    sp.add_argument("--truth", required=True)
    sp.add_argument("--predicted", required=True)

    sp = sub.add_parser("pipeline", help="run all stages")
    sp.add_argument("--input", default=None)
    _add_output_dir(sp)
    sp.add_argument("--config", default="", help="pipeline key=value file")
    _add_sor_flags(sp)
    _add_csf_flags(sp)
    sp.add_argument("--dtm-cell", type=float, default=None)
    sp.add_argument("--dtm-radius", type=float, default=None)
    sp.add_argument("--profile-cut", default=None, metavar="x1,y1,x2,y2")
    sp.add_argument("--profile-halfwidth", type=float, default=None)
    sp.add_argument("--profile-bin", type=float, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--workers", type=int, default=None)
    for stage in ("denoise", "filter", "normals", "dtm", "mesh", "profile", "report"):
        sp.add_argument(f"--skip-{stage}", action="store_true", default=None)

    sp = sub.add_parser("serve", help="run the HTTP service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8400)

    return p


def _post(server, path, payload):
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(path, json=payload)

    from .service import create_app

    async def go():
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport, base_url="http://terracloth") as client:
            return await client.post(path, json=payload, timeout=None)

    return asyncio.run(go())


def _out(args, name):
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    return str(outdir / name)


def _pipeline_overrides(args):
    names = (
        ("input", "input"),
        ("output_dir", "output_dir"),
        ("sor_k", "sor_k"),
        ("sor_sigma", "sor_sigma"),
        ("csf_gr", "csf_gr"),
        ("csf_dt", "csf_dt"),
        ("csf_rigidness", "csf_rigidness"),
        ("csf_steep_slope", "csf_steep_slope"),
        ("csf_threshold", "csf_threshold"),
        ("csf_max_iter", "csf_max_iter"),
        ("allow_fine_grid", "allow_fine_grid"),
        ("debug_cloth", "debug_cloth"),
        ("dtm_cell", "dtm_cell"),
        ("dtm_radius", "dtm_radius"),
        ("profile_cut", "profile_cut"),
        ("profile_halfwidth", "profile_halfwidth"),
        ("profile_bin", "profile_bin"),
        ("seed", "seed"),
        ("workers", "workers"),
        ("skip_denoise", "skip_denoise"),
        ("skip_filter", "skip_filter"),
        ("skip_normals", "skip_normals"),
        ("skip_dtm", "skip_dtm"),
        ("skip_mesh", "skip_mesh"),
        ("skip_profile", "skip_profile"),
        ("skip_report", "skip_report"),
    )
    overrides = {}
    for attr, key in names:
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    # output_dir always has a value; it is a harmless default-equal override
    return overrides


def _request_for(args):
    """Map parsed args to (endpoint, payload, render)."""
    cmd = args.command
    if cmd == "merge":
        payload = {"input": args.input, "output": _out(args, "merged.ply")}
        return "/v1/merge", payload, lambda b: print(f"merged {b['points']} points -> {b['output']}")

    if cmd == "denoise":
        payload = {"input": args.input, "output": _out(args, "denoised.ply")}
        if args.sor_k is not None:
            payload["k"] = args.sor_k
        if args.sor_sigma is not None:
            payload["sigma"] = args.sor_sigma

        def render(b):
            print(f"kept {b['kept']} of {b['raw']} points (flagged {b['flagged']}) -> {b['output']}")

        return "/v1/denoise", payload, render

    if cmd == "filter":
        payload = {
            "input": args.input,
            "labels_output": _out(args, "labels.ply"),
            "ground_output": _out(args, "ground.ply"),
        }
        for attr, key in (
            ("csf_gr", "gr"),
            ("csf_dt", "dt"),
            ("csf_rigidness", "rigidness"),
            ("csf_steep_slope", "steep_slope"),
            ("csf_threshold", "threshold"),
            ("csf_max_iter", "max_iter"),
            ("allow_fine_grid", "allow_fine_grid"),
        ):
            value = getattr(args, attr)
            if value is not None:
                payload[key] = value
        if args.debug_cloth:
            payload["debug_cloth_output"] = _out(args, "cloth.ply")

        def render(b):
            print(
                f"ground {b['ground']} / non-ground {b['non_ground']} "
                f"of {b['points']} points in {b['iterations']} iterations"
            )

        return "/v1/filter", payload, render

    if cmd == "dtm":
        payload = {
            "input": args.input,
            "output": _out(args, "dtm.asc"),
            "mesh_output": _out(args, "mesh.ply"),
            "cell": args.dtm_cell,
            "radius": args.dtm_radius,
        }

        def render(b):
            print(
                f"raster {b['width']}x{b['height']} ({b['valid_cells']} cells, "
                f"{b['nodata_cells']} nodata), mesh {b['mesh_faces']} faces"
            )

        return "/v1/dtm", payload, render

    if cmd == "profile":
        payload = {
            "input": args.input,
            "output": _out(args, "profile.txt"),
            "cut": args.profile_cut,
            "half_width": args.profile_halfwidth,
            "bin": args.profile_bin,
        }

        def render(b):
            print(f"{len(b['distances'])} bins, delta_m={b['delta']:.6g}")

        return "/v1/profile", payload, render

    if cmd == "report":
        return "/v1/report", {"input": args.input}, lambda b: print(b["text"])

    if cmd == "synth":
        config = {}
        if args.config:
            from .pipeline import load_config_file

            config = load_config_file(args.config)
        payload = {"output": _out(args, "scene.ply"), "config": config}
        if args.seed is not None:
            payload["seed"] = args.seed

        def render(b):
            print(
                f"wrote {b['points']} points (ground {b['ground']}, "
                f"non-ground {b['non_ground']}, outliers {b['outliers']}) -> {b['output']}"
            )

        return "/v1/synth", payload, render

    if cmd == "eval":
        payload = {"truth": args.truth, "predicted": args.predicted}

        def render(b):
            print(
                f"type1={b['type1']:.6f} type2={b['type2']:.6f} total={b['total']:.6f} "
                f"(ground {b['ground_total']}, non-ground {b['non_ground_total']})"
            )

        return "/v1/eval", payload, render

    if cmd == "pipeline":
        payload = {"config_path": args.config, "overrides": _pipeline_overrides(args)}

        def render(b):
            for line in b["log"]:
                print(line)
            if b.get("report"):
                print(b["report"]["text"])

        return "/v1/pipeline", payload, render

    raise AssertionError(f"unhandled command {cmd}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import logging

        import uvicorn

        from .service import create_app

        logging.basicConfig(level=logging.INFO, format="%(message)s")
        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    endpoint, payload, render = _request_for(args)
    try:
        resp = _post(args.server, endpoint, payload)
    except httpx.HTTPError as exc:
        print(f"error[io]: cannot reach service: {exc}", file=sys.stderr)
        return 3

    try:
        body = resp.json()
    except ValueError:
        body = {}
    if resp.status_code == 200:
        render(body)
        return 0
    err = body.get("error") if isinstance(body, dict) else None
    if err:
        print(f"error[{err['category']}] {err['type']}: {err['message']}", file=sys.stderr)
        return _EXIT_BY_CATEGORY.get(err["category"], 1)
    print(f"error[http {resp.status_code}]: {resp.text[:500]}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
