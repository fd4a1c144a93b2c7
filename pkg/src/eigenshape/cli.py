"""Command-line entry points for the full pipeline."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import dataset as ds
from . import fem, geometry, metrics, pixelize, training

EXIT_BAD_FLAGS = 2
EXIT_GENERATION = 3
EXIT_IO = 4
EXIT_DIVERGENCE = 5
EXIT_CENSUS = 6
EXIT_BAD_SHAPE = 7
EXIT_PORT_BUSY = 8


class ShapeInputError(Exception):
    pass


def load_shape(path: str) -> geometry.DomainShape:
    """Shape JSON: {kind, points [[x,y]...], epsilon, r}."""
    try:
        with open(path) as f:
            spec = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ShapeInputError(f"cannot read shape file: {exc}") from exc
    try:
        return geometry.shape_from_points(
            spec["points"],
            kind=spec.get("kind", "polygon"),
            epsilon=float(spec.get("epsilon", 0.0)),
            r=float(spec.get("r", 0.5)),
        )
    except (KeyError, TypeError, ValueError, geometry.SelfIntersecting) as exc:
        raise ShapeInputError(f"malformed shape: {exc}") from exc


def _setting_label(manifest: dict) -> str:
    d = manifest.get("d", "?")
    label = f"{d}x{d}"
    if manifest.get("detailed"):
        label += "+dp"
    if manifest.get("align"):
        label += "+ma"
    return label


def cmd_generate(args) -> int:
    records, manifest = ds.generate_dataset(
        args.n, d=args.d, k=args.k, h=args.h, smooth_fraction=args.smooth_fraction,
        detailed=args.dp, align=args.ma, sigma=args.sigma, seed=args.seed,
        audit=args.audit, progress=not args.quiet,
    )
    ds.write_dataset(records, manifest, args.out)
    counts = manifest["counts"]
    print(f"wrote {len(records)} records to {args.out} "
          f"({counts['smooth']} smooth, {counts['polygon']} polygon, "
          f"{manifest['rejected']} rejected draws)")
    return 0


def cmd_train(args) -> int:
    records, manifest = ds.read_dataset(args.data)
    images, lams, rasters, masks = ds.stack_arrays(records)
    idx = args.index
    if not 1 <= idx <= manifest["k"]:
        print(f"eigen index {idx} outside dataset range 1..{manifest['k']}", file=sys.stderr)
        return EXIT_BAD_FLAGS
    common = dict(eig_index=idx, seed=args.seed, deterministic=args.deterministic)
    if args.task == "ev":
        cfg = training.cnn_config(**common)
    else:
        cfg = training.fno_config(**common)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.batch is not None:
        cfg.batch_size = args.batch
    if args.task == "ev":
        model, hist = training.train_eigenvalue(
            cfg, images, lams[:, idx - 1], log_path=args.log, progress=not args.quiet)
    else:
        model, hist = training.train_eigenfunction(
            cfg, images, rasters[:, idx - 1], masks, log_path=args.log,
            progress=not args.quiet)
    header = {
        "eig_index": idx,
        "epoch": cfg.epochs,
        "metrics": {"train_loss": hist.train_loss[-1], "test_loss": hist.test_loss[-1]},
        "detailed": manifest.get("detailed", True),
        "align": manifest.get("align", True),
        "setting": _setting_label(manifest),
        "task": args.task,
    }
    ds.write_checkpoint(model, header, args.out)
    print(f"wrote checkpoint {args.out} (final test loss {hist.test_loss[-1]:.4f})")
    return 0


def cmd_eval(args) -> int:
    model, header = ds.read_checkpoint(args.model)
    records, manifest = ds.read_dataset(args.data)
    images, lams, rasters, masks = ds.stack_arrays(records)
    train_idx, test_idx = training.split_dataset(images.shape[0], args.split_ratio,
                                                 args.seed)
    pick = {"test": test_idx, "train": train_idx,
            "all": np.arange(images.shape[0])}[args.split]
    idx = header.get("eig_index", 1)
    if header["architecture"].startswith("cnn"):
        pred = training.predict_eigenvalues(model, images[pick])
        report = metrics.evaluate_eigenvalues(pred, lams[pick, idx - 1], eig_index=idx)
        table = metrics.render_table(
            [{"Setting": _setting_label(manifest), "RMSE": report.rmse,
              "R2": report.r2, "MAPE": f"{report.mape_percent:.2f}%"}],
            ["Setting", "RMSE", "R2", "MAPE"])
    else:
        pred = training.predict_eigenfunctions(model, images[pick])
        report = metrics.evaluate_eigenfunctions(pred, rasters[pick, idx - 1],
                                                 masks[pick], eig_index=idx)
        table = metrics.render_table(
            [{"Setting": _setting_label(manifest), "MaxAE": report.maxae,
              "PSNR": report.psnr_db, "RelL1": f"{report.rel_l1_percent:.2f}%"}],
            ["Setting", "MaxAE", "PSNR", "RelL1"])
    print(table)
    if args.report:
        with open(args.report, "w") as f:
            f.write(report.to_json(indent=1))
        print(f"wrote report {args.report}")
    if args.plots:
        os.makedirs(args.plots, exist_ok=True)
        if args.history:
            plot_history(args.history, os.path.join(args.plots, "loss.svg"))
        plot_worst_gallery(report, images[pick], os.path.join(args.plots, "worst.svg"))
        print(f"wrote plots under {args.plots}")
    return 0


def plot_history(jsonl_path: str, out_svg: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [json.loads(line) for line in open(jsonl_path)]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy([r["epoch"] for r in rows], [r["train_loss"] for r in rows], label="train")
    ax.semilogy([r["epoch"] for r in rows], [r["test_loss"] for r in rows], label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)


def plot_worst_gallery(report: metrics.EvalReport, images: np.ndarray,
                       out_svg: str, n_show: int = 5) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    key = "abs_error" if "abs_error" in report.worst else "rel_l1"
    worst = report.worst[key][:n_show]
    fig, axes = plt.subplots(1, max(len(worst), 1), figsize=(2.2 * max(len(worst), 1), 2.6))
    if len(worst) == 1:
        axes = [axes]
    for ax, item in zip(np.atleast_1d(axes), worst):
        i = item["sample"]
        ax.imshow(images[i, 0], origin="lower", cmap="gray")
        if "true" in item:
            ax.set_title(f"T:{item['true']:.1f} P:{item['pred']:.1f}\nE:{item['error']:.2f}",
                         fontsize=8)
        else:
            ax.set_title(f"RelL1 {item['rel_l1']:.1f}%", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)


def cmd_predict(args) -> int:
    model, header = ds.read_checkpoint(args.model)
    d = header["d"]
    out: dict = {"architecture": header["architecture"], "eig_index": header.get("eig_index", 1)}
    if args.shape:
        shape = load_shape(args.shape)
        img = pixelize.canonicalize(shape, d, detailed=header.get("detailed", True),
                                    align=header.get("align", True))
        values = img.values
        out["transform"] = img.transform.summary()
        scale = img.transform.scale
    else:
        values = np.load(args.image)
        if values.shape != (d, d):
            print(f"image must be {d}x{d}, got {values.shape}", file=sys.stderr)
            return EXIT_BAD_SHAPE
        out["transform"] = None
        scale = 1.0
    batch = values[None, None].astype(np.float32)
    if header["architecture"].startswith("cnn"):
        lam_canon = float(training.predict_eigenvalues(model, batch)[0])
        out["lambda_canonical"] = lam_canon
        out["lambda_original"] = pixelize.rescale_eigenvalue(lam_canon, scale)
    else:
        raster = training.predict_eigenfunctions(model, batch)[0]
        out["raster"] = np.asarray(raster, dtype=float).tolist()
    text = json.dumps(out, indent=1)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        print(text)
    return 0


def cmd_solve(args) -> int:
    shape = load_shape(args.shape)
    boundary = geometry.flatten_boundary(shape, 1e-3)
    hs = [float(x) for x in args.h.split(",")]
    rows = []
    for h in hs:
        mesh = fem.triangulate(boundary, h)
        pairs = fem.solve_eigs(fem.assemble(mesh), args.k)
        rows.append({"h": h, "vertices": mesh.n_vertices,
                     **{f"lambda{i + 1}": p.lam for i, p in enumerate(pairs)}})
    cols = ["h", "vertices"] + [f"lambda{i + 1}" for i in range(args.k)]
    print(metrics.render_table(rows, cols))
    if args.out and args.d:
        os.makedirs(args.out, exist_ok=True)
        mesh = fem.triangulate(boundary, hs[-1])
        pairs = fem.solve_eigs(fem.assemble(mesh), args.k)
        for i, pair in enumerate(pairs):
            raster = fem.normalize_and_sign(fem.rasterize_eigenfunction(mesh, pair, args.d))
            img = pixelize.PixelImage(d=args.d,
                                      values=np.clip(np.abs(raster) / max(np.abs(raster).max(), 1e-12), 0, 1),
                                      transform=pixelize.CanonicalTransform())
            pixelize.write_pgm(img, os.path.join(args.out, f"eigenfunction_{i + 1}.pgm"))
            np.save(os.path.join(args.out, f"eigenfunction_{i + 1}.npy"), raster)
        print(f"wrote rasters under {args.out}")
    return 0


def cmd_serve(args) -> int:
    from . import service

    if not os.path.isdir(args.models):
        print(f"model directory {args.models} does not exist", file=sys.stderr)
        return EXIT_CENSUS
    try:
        server = service.make_server(args.models, args.port, fem_h=args.fem_h,
                                     threads=args.threads)
    except OSError as exc:
        print(f"cannot bind port {args.port}: {exc}", file=sys.stderr)
        return EXIT_PORT_BUSY
    names = ", ".join(sorted(server.registry.inventory_ids())) or "none"
    print(f"eigenshape service on port {server.server_port} (models: {names})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eigenshape",
                                     description="shape-to-spectrum toolkit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--deterministic", action="store_true", default=True)
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--smooth-fraction", type=float, default=0.5, dest="smooth_fraction")
    g.add_argument("--d", type=int, default=32)
    g.add_argument("--k", type=int, default=3)
    g.add_argument("--h", type=float, default=0.02)
    g.add_argument("--sigma", type=int, default=8)
    g.add_argument("--dp", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--ma", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--audit", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--task", choices=("ev", "ef"), required=True)
    t.add_argument("--index", type=int, default=1)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--split-ratio", type=float, default=0.8, dest="split_ratio")
    e.add_argument("--report")
    e.add_argument("--plots")
    e.add_argument("--history")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="run a model on one shape or image")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--shape")
    src.add_argument("--image", help="d x d .npy raster; bypasses canonicalization")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    s = sub.add_parser("solve", help="FEM ground truth, no model")
    s.add_argument("--shape", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--h", default="0.02", help="mesh size, or comma list for a sweep")
    s.add_argument("--d", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("serve", help="HTTP inference service")
    v.add_argument("--models", required=True)
    v.add_argument("--port", type=int, default=8080)
    v.add_argument("--fem-h", type=float, default=0.02, dest="fem_h")
    v.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ShapeInputError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_BAD_SHAPE
    except training.Divergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ds.CensusMismatch as exc:
        print(f"checkpoint census mismatch: {exc}", file=sys.stderr)
        return EXIT_CENSUS
    except (ds.ChecksumMismatch, ds.VersionUnsupported, ds.TruncatedRecord) as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_IO
    except (geometry.SelfIntersecting, geometry.InfeasibleSpacing, fem.MeshFailure,
            fem.ConvergenceFailure) as exc:
        print(f"generation failure: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
