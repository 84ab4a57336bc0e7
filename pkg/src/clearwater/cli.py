"""Command line driver: generate, train, correct, render, evaluate.

Exit codes: 0 success, 2 input/validation error, 3 runtime failure. Every
command validates its inputs before touching the output locations, so a bad
invocation never leaves partial files behind.

Heavy imports happen inside the handlers: --threads caps the BLAS pools via
environment variables, which only works while numpy is not yet loaded.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class CommandError(Exception):
    """Invalid input; maps to exit code 2."""


def _load_toml(path: str) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as e:
        raise CommandError(f"cannot read {path}: {e.strerror or e}") from e
    except tomllib.TOMLDecodeError as e:
        raise CommandError(f"{path}: {e}") from e


def _check_keys(table: dict, allowed: set, where: str) -> None:
    for key in table:
        if key not in allowed:
            raise CommandError(f"{where}: unknown key '{key}'")


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise CommandError(f"--size must look like 64x64, got {text!r}")
    w, h = int(parts[0]), int(parts[1])
    if w < 1 or h < 1:
        raise CommandError("--size dimensions must be positive")
    return w, h


def _scene_from_toml(path: str):
    from . import synth

    raw = _load_toml(path)
    _check_keys(raw, {"camera", "trajectory", "plane", "sphere"}, path)
    cam = raw.get("camera", {})
    _check_keys(cam, {"fov_deg", "near", "far"}, f"{path}: camera")
    traj = raw.get("trajectory", {})
    kind = traj.get("kind", "orbit")
    if kind == "orbit":
        _check_keys(traj, {"kind", "altitudes", "orbit_radius", "target"},
                    f"{path}: trajectory")
    elif kind == "survey":
        _check_keys(traj, {"kind", "scan_alt", "overview_alt", "scan_radius",
                           "overview_radius"}, f"{path}: trajectory")
    else:
        raise CommandError(f"{path}: trajectory kind must be 'orbit' or 'survey', "
                           f"got {kind!r}")

    surfaces = []
    if "plane" in raw:
        _check_keys(raw["plane"], {"z", "half_extent", "squares"}, f"{path}: plane")
        surfaces.append(synth.CheckerPlane(**raw["plane"]))
    for i, sphere in enumerate(raw.get("sphere", [])):
        _check_keys(sphere, {"center", "radius", "albedo"}, f"{path}: sphere[{i}]")
        surfaces.append(synth.Sphere(center=tuple(sphere["center"]),
                                     radius=sphere["radius"],
                                     albedo=tuple(sphere["albedo"])))
    if not surfaces:
        raise CommandError(f"{path}: scene needs a plane or at least one sphere")
    try:
        scene = synth.AnalyticScene(surfaces=tuple(surfaces))
    except (ValueError, TypeError) as e:
        raise CommandError(f"{path}: {e}") from e
    camera = {"fov_deg": cam.get("fov_deg", 50.0), "near": cam.get("near", 0.3),
              "far": cam.get("far", 4.5)}
    if kind == "survey":
        plane_z = raw["plane"].get("z", 0.0) if "plane" in raw else 0.0
        trajectory = {"kind": "survey",
                      "scan_alt": traj.get("scan_alt", 1.0),
                      "overview_alt": traj.get("overview_alt", 3.0),
                      "scan_radius": traj.get("scan_radius", 0.6),
                      "overview_radius": traj.get("overview_radius", 0.45),
                      "plane_z": plane_z}
    else:
        trajectory = {"kind": "orbit",
                      "altitudes": tuple(traj.get("altitudes", (1.0, 3.0))),
                      "orbit_radius": traj.get("orbit_radius", 0.45),
                      "target": tuple(traj.get("target", (0.0, 0.0, 0.0)))}
    return scene, camera, trajectory


def _water_from_toml(path: str):
    from . import renderer as rd
    from . import watermodel as wm

    raw = _load_toml(path)
    _check_keys(raw, {"water", "light"}, path)
    water_tab = raw.get("water", {})
    _check_keys(water_tab, {"beta", "backscatter", "a", "b"}, f"{path}: water")
    light_tab = raw.get("light", {})
    _check_keys(light_tab, {"e0"}, f"{path}: light")
    try:
        water = wm.WaterParams(beta=tuple(water_tab.get("beta", wm.BETA_INIT)),
                               backscatter=tuple(water_tab.get("backscatter",
                                                               wm.BACKSCATTER_INIT)),
                               a=water_tab.get("a", 3.0), b=water_tab.get("b", 3.0))
        light = rd.LightModel(intensity=light_tab.get("e0", (1.0, 1.0, 1.0)))
    except (ValueError, TypeError) as e:
        raise CommandError(f"{path}: {e}") from e
    return water, light


def demo_path(name: str) -> str:
    """Path of a bundled demo config (scene.toml, water.toml, train.toml)."""
    return os.path.join(os.path.dirname(__file__), "demo", name)


def _cmd_generate(args) -> int:
    scene, camera, trajectory = _scene_from_toml(args.scene)
    water, light = _water_from_toml(args.water)
    width, height = _parse_size(args.size)
    if args.views < 1:
        raise CommandError("--views must be at least 1")
    if args.seed < 0:
        raise CommandError("--seed must be non-negative")

    from . import synth

    if trajectory["kind"] == "survey":
        traj = synth.survey_trajectory(args.views,
                                       scan_alt=trajectory["scan_alt"],
                                       overview_alt=trajectory["overview_alt"],
                                       scan_radius=trajectory["scan_radius"],
                                       overview_radius=trajectory["overview_radius"],
                                       plane_z=trajectory["plane_z"])
    else:
        traj = synth.orbit_trajectory(args.views, altitudes=trajectory["altitudes"],
                                      orbit_radius=trajectory["orbit_radius"],
                                      target=trajectory["target"])
    out = synth.generate_dataset(scene, water, light, traj, width, height,
                                 args.out, args.seed, fov_deg=camera["fov_deg"],
                                 near=camera["near"], far=camera["far"])
    print(f"wrote {args.views} views to {out}")
    return 0


def _cmd_train(args) -> int:
    from . import dataset as dst
    from . import training as tr

    try:
        config = tr.load_config(args.config)
        ds = dst.load_dataset(args.data)
    except (ValueError, OSError) as e:
        raise CommandError(str(e)) from e
    if args.resume is not None and not os.path.exists(args.resume):
        raise CommandError(f"resume checkpoint not found: {args.resume}")

    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    tr.fit(ds, config, args.out, resume=args.resume)

    from . import checkpoint as ck

    store, meta = ck.load_checkpoint(args.out)
    beta, backscatter = tr.water_values(store)
    print(f"checkpoint: {args.out} (step {meta['step']})")
    print("beta:        " + " ".join(f"{v:.6f}" for v in beta))
    print("backscatter: " + " ".join(f"{v:.6f}" for v in backscatter))
    return 0


def _field_from_checkpoint(ckpt_path: str, data_dir: str):
    """Rebuild (dataset, field, store, config) from a checkpoint + dataset."""
    from . import checkpoint as ck
    from . import dataset as dst
    from . import training as tr

    try:
        ds = dst.load_dataset(data_dir)
        store, meta = ck.load_checkpoint(ckpt_path)
    except (ValueError, OSError, ck.CheckpointError) as e:
        raise CommandError(str(e)) from e
    conf = meta.get("config")
    if not isinstance(conf, dict):
        raise CommandError(f"{ckpt_path}: checkpoint carries no training config")
    config = tr.config_from_dict(conf)
    fld = tr.build_field(ds, config)
    return ds, fld, store, config


def _value_query(fld, store):
    """Plain-array field query for inference paths."""
    from . import gradcore as gc
    from .scenefield import SceneSample

    def query(x):
        tape = gc.Tape()
        ctx = gc.EvalContext(store, tape)
        s = fld.query(ctx, x)
        out = SceneSample(sigma=gc.value_of(s.sigma), albedo=gc.value_of(s.albedo),
                          normal=gc.value_of(s.normal))
        tape.clear()
        return out

    return query


def _cmd_correct(args) -> int:
    ds, fld, store, config = _field_from_checkpoint(args.ckpt, args.data)
    samples = args.samples if args.samples is not None else config.samples_per_ray

    from . import dataset as dst
    from . import renderer as rd

    os.makedirs(os.path.join(args.out, "previews"), exist_ok=True)
    query = _value_query(fld, store)
    near = config.near if config.near is not None else ds.near
    far = config.far if config.far is not None else ds.far
    for idx, frame in enumerate(ds.frames):
        img = rd.render_image(ds.camera(idx), query, None, ds.light, samples,
                              "true_color", d_n=near, d_f=far,
                              a=config.a, b=config.b)
        name = os.path.basename(frame.file)
        dst.write_png16(os.path.join(args.out, name), img)
        dst.write_preview(os.path.join(args.out, "previews", name), img)
        print(f"corrected {name}")
    print(f"wrote {len(ds.frames)} corrected frames to {args.out}")
    return 0


def _pose_from_arg(text: str, ds):
    import json

    import numpy as np

    if text.isdigit():
        idx = int(text)
        if idx >= len(ds):
            raise CommandError(f"--pose index {idx} out of range (dataset has {len(ds)} frames)")
        return ds.frames[idx].pose
    try:
        with open(text) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise CommandError(f"cannot read pose file {text}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise CommandError(f"{text}: {e}") from e
    values = raw.get("transform") if isinstance(raw, dict) else raw
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != 16:
        raise CommandError(f"{text}: pose needs 16 numbers, got {arr.size}")
    return arr.reshape(4, 4)


def _cmd_render(args) -> int:
    ds, fld, store, config = _field_from_checkpoint(args.ckpt, args.data)
    pose = _pose_from_arg(args.pose, ds)
    samples = args.samples if args.samples is not None else config.samples_per_ray

    from . import dataset as dst
    from . import renderer as rd
    from . import watermodel as wm

    camera = rd.Camera(fx=ds.fx, fy=ds.fy, cx=ds.cx, cy=ds.cy,
                       width=ds.width, height=ds.height, pose=pose)
    water = None
    if args.mode == "underwater":
        from . import training as tr

        beta, backscatter = tr.water_values(store)
        water = wm.WaterParams(beta=beta, backscatter=backscatter,
                               a=config.a, b=config.b)
    query = _value_query(fld, store)
    near = config.near if config.near is not None else ds.near
    far = config.far if config.far is not None else ds.far
    img = rd.render_image(camera, query, water, ds.light, samples, args.mode,
                          d_n=near, d_f=far, a=config.a, b=config.b)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    dst.write_png16(args.out, img)
    stem, ext = os.path.splitext(args.out)
    dst.write_preview(stem + "_preview" + ext, img)
    print(f"rendered {args.mode} view to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    for d in (args.pred, args.ref):
        if not os.path.isdir(d):
            raise CommandError(f"not a directory: {d}")
    pred_files = sorted(f for f in os.listdir(args.pred) if f.endswith(".png"))
    ref_files = sorted(f for f in os.listdir(args.ref) if f.endswith(".png"))
    missing = sorted(set(pred_files) ^ set(ref_files))
    if missing:
        raise CommandError("prediction/reference sets differ: " + ", ".join(missing))
    if not pred_files:
        raise CommandError("no .png files to compare")

    from . import color
    from . import dataset as dst

    import numpy as np

    rows = []
    for name in pred_files:
        pred = dst.read_png16(os.path.join(args.pred, name))
        ref = dst.read_png16(os.path.join(args.ref, name))
        if pred.shape != ref.shape:
            raise CommandError(f"{name}: shape {pred.shape} != reference {ref.shape}")
        mse_a, mse_b = color.mse_ab(pred, ref)
        # mse_ab wants linear RGB; the angular metric is defined on sRGB.
        ang = color.angular_error(color.tone_map(pred), color.tone_map(ref))
        rows.append((name, mse_a, mse_b, ang))

    means = np.mean([[r[1], r[2], r[3]] for r in rows], axis=0)
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    with open(args.report, "w") as fh:
        fh.write("file,mse_a,mse_b,angular_error_rad\n")
        for name, mse_a, mse_b, ang in rows:
            fh.write(f"{name},{mse_a:.8f},{mse_b:.8f},{ang:.8f}\n")
        fh.write(f"mean,{means[0]:.8f},{means[1]:.8f},{means[2]:.8f}\n")
    print(f"mean mse_a {means[0]:.4f}  mse_b {means[1]:.4f}  angular {means[2]:.5f} rad"
          f"  ({len(rows)} images, report: {args.report})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clearwater",
        description="Underwater capture simulation, water estimation, and color restoration.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP thread pools (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--scene", default=demo_path("scene.toml"))
    p.add_argument("--water", default=demo_path("water.toml"))
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--size", default="64x64")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_generate)

    p = sub.add_parser("train", help="fit water and scene parameters to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=demo_path("train.toml"))
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("correct", help="write true-color versions of every frame")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(handler=_cmd_correct)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pose", required=True, help="frame index or JSON pose file")
    p.add_argument("--mode", choices=("underwater", "true_color"), default="true_color")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(handler=_cmd_render)

    p = sub.add_parser("evaluate", help="compare corrected frames against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(handler=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    try:
        return args.handler(args)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - boundary of the process
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
