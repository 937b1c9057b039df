"""``icgeom`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 invariance failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import net
from .geomfeat import FEATURE_NAMES, per_point_features
from .metrics import evaluate, invariance_check, write_eval_artifacts
from .pointcloud import (DEFAULT_BUDGET, PointCloud, load_mesh, normalize_unit_sphere, read_xyz,
                         resample_mesh, write_xyz)
from .train import TrainConfig, make_synthetic_dataset, train

log = logging.getLogger("icgeom")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANCE = 0, 1, 2, 3

PRESETS = {"default": {}, "compact": net.COMPACT}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Dataset helpers


def class_directories(root: Path) -> List[Path]:
    return sorted(p for p in root.iterdir() if p.is_dir())


def file_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def preprocess_corpus(root, points: int = DEFAULT_BUDGET, seed: int = 7, normalize: bool = True):
    """Yield ``(class_name, stem, cloud)`` for ``<root>/<class>/<object>.obj``.

    Class ids follow sorted class-name order.
    """
    root = Path(root)
    index = 0
    for label, cdir in enumerate(class_directories(root)):
        for path in sorted(cdir.glob("*.obj")):
            cloud = resample_mesh(load_mesh(path), points, file_seed(seed, index), label)
            if normalize:
                cloud = normalize_unit_sphere(cloud)
            index += 1
            yield cdir.name, path.stem, cloud


def load_dataset(root, points: int = DEFAULT_BUDGET, seed: int = 7) -> List[PointCloud]:
    """Labeled clouds from a directory of ``.xyz`` files (labels from their
    headers, or from the sorted class directory otherwise) or from raw
    ``<class>/<object>.obj`` meshes."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    xyz = sorted(root.rglob("*.xyz"))
    if xyz:
        classes = {p.name: i for i, p in enumerate(class_directories(root))}
        out = []
        for path in xyz:
            cloud = read_xyz(path)
            if cloud.label is None:
                rel = path.relative_to(root).parts
                if len(rel) < 2:
                    raise ValueError(f"{path}: no label header and no class directory")
                cloud.label = classes[rel[0]]
            out.append(cloud)
        return out
    out = [c for _, _, c in preprocess_corpus(root, points, seed, normalize=False)]
    if not out:
        raise ValueError(f"no .xyz or .obj files under {root}")
    return out


def parse_synthetic(spec: str):
    """``FAMILIES[:PER_CLASS[:NOISE]]``, e.g. ``plate,sphere,strut:50:0.02``."""
    parts = spec.split(":")
    if not 1 <= len(parts) <= 3:
        raise UsageError(f"bad synthetic spec {spec!r}")
    families = [f for f in parts[0].split(",") if f]
    try:
        per_class = int(parts[1]) if len(parts) > 1 else 50
        noise = float(parts[2]) if len(parts) > 2 else 0.02
    except ValueError:
        raise UsageError(f"bad synthetic spec {spec!r}") from None
    return families, per_class, noise


# ---------------------------------------------------------------------------
# Commands


def cmd_preprocess(args) -> int:
    out_root = Path(args.output)
    count = 0
    for cname, stem, cloud in preprocess_corpus(args.input, args.points, args.seed, not args.no_normalize):
        (out_root / cname).mkdir(parents=True, exist_ok=True)
        write_xyz(cloud, out_root / cname / f"{stem}.xyz")
        count += 1
    print(f"wrote {count} clouds to {out_root}")
    return EXIT_OK


def cmd_features(args) -> int:
    cloud = read_xyz(args.input)
    feats = per_point_features(cloud, args.k)
    lines = [",".join(FEATURE_NAMES)] + [",".join(f"{v:.9g}" for v in row) for row in feats]
    Path(args.output).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    if (args.data is None) == (args.synthetic is None):
        raise UsageError("give exactly one of --data or --synthetic")
    if args.synthetic is not None:
        families, per_class, noise = parse_synthetic(args.synthetic)
        dataset = make_synthetic_dataset(families, per_class, args.points, noise, args.seed)
    else:
        dataset = load_dataset(args.data, args.points, args.seed)
    config = TrainConfig(k=args.k, lr=args.lr, momentum=args.momentum, epochs=args.epochs,
                         batch_size=args.batch, seed=args.seed, points=args.points,
                         normalize=not args.no_normalize, num_classes=args.classes,
                         widths=PRESETS[args.preset])
    log_path = Path(args.log)
    log_path.write_text("epoch,train_loss,val_accuracy\n")

    def on_epoch(m):
        with log_path.open("a") as fh:
            fh.write(f"{m.epoch},{m.train_loss:.9g},{m.val_accuracy:.9g}\n")
        print(f"epoch {m.epoch:3d}  loss {m.train_loss:.4f}  val_acc {m.val_accuracy:.3f}")

    result = train(config, dataset, on_epoch=on_epoch)
    net.save_model(result.model, args.out)
    print(f"saved {args.out} ({net.param_count(result.model)} parameters)")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = net.load_model(args.model)
    dataset = load_dataset(args.data, seed=args.seed)
    result = evaluate(model, dataset, normalize=not args.no_normalize)
    write_eval_artifacts(result, args.out_dir, net.param_count(model))
    print(f"accuracy {result.accuracy:.4f} on {len(dataset)} clouds")
    return EXIT_OK


def cmd_check_invariance(args) -> int:
    model = net.load_model(args.model)
    cloud = read_xyz(args.input)
    report = invariance_check(model, cloud, args.trials, args.seed, normalize=not args.no_normalize)
    print("\n".join(report.lines()))
    return EXIT_INVARIANCE if report.failed else EXIT_OK


def cmd_info(args) -> int:
    model = net.load_model(args.model)
    cfg = model.config
    print(f"parameters: {net.param_count(model)}")
    print(f"classes: {cfg.num_classes}  k: {cfg.k}")
    print(f"embed: {list(cfg.embed_widths)}  edge: {list(cfg.edge_widths)}  head: {list(cfg.head_widths)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icgeom", description="Point-cloud classification with geometric EdgeConv networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="resample <root>/<class>/<object>.obj meshes to .xyz clouds")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--points", type=int, default=DEFAULT_BUDGET)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--no-normalize", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("features", help="per-point geometric features of an .xyz cloud")
    s.add_argument("--input", required=True)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train a classifier with SGD")
    s.add_argument("--data")
    s.add_argument("--synthetic", help="FAMILIES[:PER_CLASS[:NOISE]], e.g. plate,sphere,strut:50:0.02")
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--points", type=int, default=DEFAULT_BUDGET)
    s.add_argument("--classes", type=int, help="class count (default: from the data)")
    s.add_argument("--preset", choices=sorted(PRESETS), default="default")
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--log", default="train_log.csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="confusion matrix, ROC curves and summary")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--no-normalize", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("check-invariance", help="permutation/translation/scale invariance report")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--no-normalize", action="store_true")
    s.set_defaults(func=cmd_check_invariance)

    s = sub.add_parser("info", help="parameter count of a checkpoint")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_info)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"icgeom: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"icgeom: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
