"""Command-line pipelines over the library.

Exit codes: 0 success, 1 I/O failure, 2 validation/precondition failure,
3 numeric failure. Every randomized command takes a seed and records it in
its report, so reruns with identical arguments produce bit-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import animate, bvh, metrics, skelfield, skinfield, syngen, voxelize
from .core import Mesh, Rig, load_rig, save_rig
from .errors import NumericError, ParseError, ValidationError

MIN_CLI_RESOLUTION = 8


def _write_json(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_resolution(resolution: int) -> None:
    if resolution < MIN_CLI_RESOLUTION:
        raise ValidationError(f"resolution must be >= {MIN_CLI_RESOLUTION}, got {resolution}")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_voxelize(args) -> int:
    _require_resolution(args.resolution)
    rig = load_rig(args.input)
    out = _out_dir(args)
    surface = voxelize.voxelize_surface(rig.mesh, args.resolution)
    skeleton = voxelize.voxelize_skeleton(rig.skeleton, args.resolution, args.dilate)
    voxelize.save_grid(surface, out / "surface_grid.json")
    voxelize.save_grid(skeleton, out / "skeleton_grid.json")
    print(f"surface voxels: {len(surface)}")
    print(f"skeleton voxels: {len(skeleton)} (dilation {args.dilate})")
    return 0


def cmd_encode_field(args) -> int:
    _require_resolution(args.resolution)
    rig = load_rig(args.input)
    grid = voxelize.voxelize_skeleton(rig.skeleton, args.resolution, args.dilate)
    field = skelfield.encode_field(rig.skeleton, grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    skelfield.save_field(field, out)
    print(f"encoded {len(field)} field samples at resolution {args.resolution}")
    return 0


def _cluster_params(bandwidth_edges: float, resolution: int, min_cluster_size: int) -> skelfield.ClusterParams:
    return skelfield.ClusterParams(
        bandwidth=bandwidth_edges / resolution,
        min_cluster_size=min_cluster_size,
    )


def _save_skeleton_rig(skeleton, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_rig(Rig(mesh=Mesh([], []), skeleton=skeleton), path)


def cmd_decode_skeleton(args) -> int:
    field = skelfield.load_field(args.field)
    params = _cluster_params(args.bandwidth_edges, field.grid.resolution, args.min_cluster_size)
    skeleton = skelfield.decode_skeleton(field, params)
    _save_skeleton_rig(skeleton, Path(args.out))
    print(f"decoded {skeleton.joint_count} joints")
    return 0


def cmd_roundtrip(args) -> int:
    _require_resolution(args.resolution)
    rig = load_rig(args.input)
    if rig.skeleton.joint_count == 0:
        raise ValidationError("round trip requires a rig with a nonempty skeleton")
    out = _out_dir(args)
    grid = voxelize.voxelize_skeleton(rig.skeleton, args.resolution, args.dilate)
    field = skelfield.encode_field(rig.skeleton, grid)
    params = _cluster_params(args.bandwidth_edges, args.resolution, args.min_cluster_size)
    voxel_edge = 1.0 / args.resolution

    trials = []
    for trial in range(args.trials):
        trial_field = field
        if args.noise > 0.0:
            trial_field = skelfield.with_offset_noise(field, args.noise * voxel_edge, args.seed + trial)
        try:
            recovered = skelfield.decode_skeleton(trial_field, params)
            j2j, j2b, b2b = metrics.chamfer_metrics(recovered, rig.skeleton)
            gw = metrics.gromov_wasserstein(recovered, rig.skeleton)
            topo, match_dist = metrics.skeleton_topology_match(recovered, rig.skeleton, tol=voxel_edge)
            trials.append(
                {
                    "trial": trial,
                    "joints_recovered": recovered.joint_count,
                    "j2j": j2j,
                    "j2b": j2b,
                    "b2b": b2b,
                    "gromov_wasserstein": gw,
                    "topology_exact": bool(topo),
                    "max_matched_joint_error": match_dist,
                }
            )
            if trial == 0:
                _save_skeleton_rig(recovered, out / "recovered_skeleton.json")
        except (ValidationError, NumericError) as exc:
            trials.append({"trial": trial, "error": str(exc), "topology_exact": False})
    successes = sum(1 for t in trials if t.get("topology_exact"))
    report = {
        "input": str(args.input),
        "resolution": args.resolution,
        "dilate": args.dilate,
        "bandwidth_edges": args.bandwidth_edges,
        "noise_edges": args.noise,
        "seed": args.seed,
        "trials": trials,
        "topology_success_rate": successes / len(trials),
    }
    _write_json(report, out / "roundtrip_report.json")
    print(f"topology-exact in {successes}/{len(trials)} trials")
    return 0


def cmd_transfer_skin(args) -> int:
    src = load_rig(args.src)
    if src.skin is None:
        raise ValidationError("source rig has no skin weights")
    dst = load_rig(args.dst)
    tree = bvh.build_bvh(src.mesh)
    if args.method == "bvh":
        skin = bvh.transfer_skin_bvh(src, dst.mesh, tree)
    else:
        skin = bvh.transfer_skin_nn(src, dst.mesh)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rig(Rig(mesh=dst.mesh, skeleton=dst.skeleton, skin=skin), out)
    print(f"transferred skin to {len(skin)} vertices via {args.method}")
    if args.bench:
        queries = dst.mesh.vertices
        t0 = time.perf_counter()
        bvh.closest_points(tree, queries)
        t_bvh = time.perf_counter() - t0
        t0 = time.perf_counter()
        bvh.transfer_skin_nn(src, dst.mesh)
        t_nn = time.perf_counter() - t0
        t0 = time.perf_counter()
        bvh.brute_force_closest(src.mesh, queries)
        t_brute = time.perf_counter() - t0
        n = len(queries)
        print(f"bench: {len(src.mesh.triangles)} triangles, {n} queries")
        print(f"  bvh closest-point:   {1e6 * t_bvh / n:10.2f} us/query")
        print(f"  nearest-vertex:      {1e6 * t_nn / n:10.2f} us/query")
        print(f"  brute-force surface: {1e6 * t_brute / n:10.2f} us/query")
        print(f"  bvh speedup over brute force: {t_brute / t_bvh:.1f}x")
    return 0


def cmd_perturb(args) -> int:
    rig = load_rig(args.input)
    if rig.skin is None:
        raise ValidationError("perturb requires a rig with skin weights")
    out = _out_dir(args)
    pose = animate.perturb_pose(rig.skeleton, prob=args.prob, max_angle_deg=args.max_deg, seed=args.seed)
    posed_mesh = animate.skin_mesh(rig, pose)
    posed_joints = animate.posed_joint_positions(rig.skeleton, pose)
    posed = Rig(
        mesh=posed_mesh,
        skeleton=type(rig.skeleton)(posed_joints, rig.skeleton.parents),
        skin=rig.skin,
    )
    save_rig(posed, out / "posed_rig.json")
    animate.save_pose(pose, out / "pose.json")
    _write_json(
        {"seed": args.seed, "prob": args.prob, "max_deg": args.max_deg},
        out / "perturb_report.json",
    )
    print(f"perturbed {rig.skeleton.joint_count} joints (prob {args.prob}, max {args.max_deg} deg, seed {args.seed})")
    return 0


def _eval_pair(pred_path: str, gt_path: str, settings: metrics.EvalSettings):
    pred = load_rig(pred_path)
    gt = load_rig(gt_path)
    return metrics.evaluate(pred, gt, settings)


def _eval_pair_star(item):
    """Worker for corpus evaluation; exceptions become recorded failures so
    one bad pair cannot sink the run (also keeps pool workers clean)."""
    name, pred_path, gt_path, settings = item
    try:
        return name, _eval_pair(pred_path, gt_path, settings), None
    except (ValidationError, ParseError, OSError) as exc:
        return name, None, ("validation", str(exc))
    except NumericError as exc:
        return name, None, ("numeric", str(exc))


def cmd_eval(args) -> int:
    pred_path = Path(args.pred)
    gt_path = Path(args.gt)
    settings = metrics.EvalSettings(
        align=args.align,
        icp_restarts=args.icp_restarts,
        samples_per_bone=args.samples_per_bone,
        epsilon=args.epsilon,
        seed=args.seed,
    )
    if pred_path.is_dir() != gt_path.is_dir():
        raise ValidationError("pred and gt must both be files or both be directories")
    if pred_path.is_dir():
        pred_files = sorted(pred_path.glob("*.json"))
        gt_files = sorted(gt_path.glob("*.json"))
        pred_stems = {p.stem: p for p in pred_files}
        gt_stems = {p.stem: p for p in gt_files}
        if set(pred_stems) != set(gt_stems):
            raise ValidationError(
                f"pred/gt directories do not pair up: {len(pred_files)} vs {len(gt_files)} files, "
                f"unmatched stems {sorted(set(pred_stems) ^ set(gt_stems))[:5]}"
            )
        pairs = [(stem, str(pred_stems[stem]), str(gt_stems[stem]), settings) for stem in sorted(pred_stems)]
    else:
        pairs = [(pred_path.stem, str(pred_path), str(gt_path), settings)]

    out = _out_dir(args)
    failures = []
    reports: dict[str, metrics.MetricReport] = {}
    if args.jobs > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_eval_pair_star, pairs))
    else:
        results = [_eval_pair_star(item) for item in pairs]
    for name, report, error in results:
        if error is not None:
            failures.append({"name": name, "kind": error[0], "error": error[1]})
            continue
        reports[name] = report
        _write_json(report.to_dict(), out / f"{name}.metrics.json")

    if reports:
        mean_values = []
        for idx in range(len(metrics.MetricReport.COLUMNS)):
            vals = [r.values()[idx] for r in reports.values() if r.values()[idx] is not None]
            mean_values.append(sum(vals) / len(vals) if vals else None)
        aggregate = {
            "pairs": len(reports),
            "failures": failures,
            "seed": args.seed,
            "mean": dict(zip(metrics.MetricReport.COLUMNS, mean_values)),
        }
        _write_json(aggregate, out / "aggregate.json")
        table = metrics.format_report_table(reports)
        mean_row = "mean  " + "  ".join(
            "-" if v is None else f"{v:.6f}" for v in mean_values
        )
        (out / "aggregate.txt").write_text(table + "\n" + mean_row + "\n", encoding="utf-8")
        print(table)
        print(mean_row)
    if failures:
        for f in failures:
            print(f"FAILED {f['name']}: {f['error']}", file=sys.stderr)
        return 3 if any(f["kind"] == "numeric" for f in failures) else 2
    return 0


def cmd_fit_skin(args) -> int:
    rig = load_rig(args.input)
    if rig.skin is None:
        raise ValidationError("fit-skin requires a rig with skin weights")
    cfg = skinfield.FitConfig(iterations=args.iterations, learning_rate=args.lr, seed=args.seed)
    result = skinfield.fit_skin_embeddings(rig.skin, rig.skeleton, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    skinfield.save_embeddings(result.embeddings, out)
    _write_json(
        {
            "seed": args.seed,
            "iterations": args.iterations,
            "learning_rate": args.lr,
            "final_kl": result.final_kl,
        },
        out.with_suffix(".report.json"),
    )
    print(f"fit finished: mean KL {result.final_kl:.6f}")
    return 0


def cmd_syngen(args) -> int:
    spec = syngen.SynthSpec(
        family=args.family,
        joint_count=args.joints,
        bone_length=(args.bone_min, args.bone_max),
        mesh_style=args.mesh_style,
        seed=args.seed,
        min_separation=args.min_separation,
        extra_roots=args.extra_roots,
    )
    rig = syngen.generate(spec)
    if args.corrupt is not None:
        rig = syngen.corrupt(rig, args.corrupt, magnitude=args.magnitude, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rig(rig, out)
    print(
        f"generated {args.family} rig: {rig.skeleton.joint_count} joints, "
        f"{rig.mesh.vertex_count} vertices"
        + (f", corrupted with {args.corrupt}" if args.corrupt else "")
    )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rigfields",
        description="Skeleton-field and skin-field rigging pipelines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="rasterize a rig's surface and skeleton into sparse grids")
    p.add_argument("--input", required=True, help="rig JSON file")
    p.add_argument("--resolution", type=int, default=64, help="voxels per axis (default 64, min 8)")
    p.add_argument("--dilate", type=int, default=2, help="skeleton grid dilation radius (default 2)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("encode-field", help="encode a rig's skeleton as a voxel vector field")
    p.add_argument("--input", required=True)
    p.add_argument("--resolution", type=int, default=64, help="voxels per axis (default 64, min 8)")
    p.add_argument("--dilate", type=int, default=2, help="support dilation radius (default 2)")
    p.add_argument("--out", required=True, help="output field JSON")
    p.set_defaults(func=cmd_encode_field)

    p = sub.add_parser("decode-skeleton", help="cluster a field file back into a skeleton")
    p.add_argument("--field", required=True, help="field JSON file")
    p.add_argument("--bandwidth-edges", type=float, default=2.0, help="mean-shift bandwidth in voxel edges (default 2)")
    p.add_argument("--min-cluster-size", type=int, default=3, help="drop clusters smaller than this (default 3)")
    p.add_argument("--out", required=True, help="output rig JSON (skeleton only)")
    p.set_defaults(func=cmd_decode_skeleton)

    p = sub.add_parser("roundtrip", help="encode, optionally perturb, decode, and score a skeleton")
    p.add_argument("--input", required=True)
    p.add_argument("--resolution", type=int, default=64, help="voxels per axis (default 64, min 8)")
    p.add_argument("--dilate", type=int, default=2, help="support dilation radius (default 2)")
    p.add_argument("--bandwidth-edges", type=float, default=2.0, help="bandwidth in voxel edges (default 2)")
    p.add_argument("--min-cluster-size", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.0, help="offset noise sigma in voxel edges (default 0)")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("transfer-skin", help="transfer skin weights onto another mesh")
    p.add_argument("--src", required=True, help="source rig with skin")
    p.add_argument("--dst", required=True, help="destination rig/mesh JSON")
    p.add_argument("--method", choices=("bvh", "nn"), default="bvh")
    p.add_argument("--bench", action="store_true", help="time bvh vs nearest-vertex vs brute force")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer_skin)

    p = sub.add_parser("perturb", help="sample a jittered pose and skin the mesh with it")
    p.add_argument("--input", required=True)
    p.add_argument("--prob", type=float, default=0.8, help="per-joint rotation probability (default 0.8)")
    p.add_argument("--max-deg", type=float, default=60.0, help="max jitter angle in degrees (default 60)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("eval", help="evaluate predicted rigs against ground truth")
    p.add_argument("--pred", required=True, help="rig JSON file or directory")
    p.add_argument("--gt", required=True, help="rig JSON file or directory")
    p.add_argument("--align", choices=("icp", "none"), default="icp")
    p.add_argument("--icp-restarts", type=int, default=100, help="random-rotation ICP restarts (default 100)")
    p.add_argument("--samples-per-bone", type=int, default=32)
    p.add_argument("--epsilon", type=float, default=None,
                   help="entropic blur; default 1e-3 x mean cost per problem")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel pairs for directory corpora")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit-skin", help="fit factorized skin embeddings to a rig's weights")
    p.add_argument("--input", required=True)
    p.add_argument("--iterations", type=int, default=3000)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output embeddings JSON")
    p.set_defaults(func=cmd_fit_skin)

    p = sub.add_parser("syngen", help="generate a synthetic rig (optionally corrupted)")
    p.add_argument("--family", choices=syngen.FAMILIES, default="tree")
    p.add_argument("--joints", type=int, default=8)
    p.add_argument("--bone-min", type=float, default=0.08)
    p.add_argument("--bone-max", type=float, default=0.2)
    p.add_argument("--mesh-style", choices=("capsule-per-bone", "sphere-per-joint"), default="capsule-per-bone")
    p.add_argument("--min-separation", type=float, default=0.0)
    p.add_argument("--extra-roots", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", choices=syngen.CORRUPTIONS, default=None)
    p.add_argument("--magnitude", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_syngen)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
