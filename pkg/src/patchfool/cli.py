"""Command-line front end: gen-data, train, attack, evaluate, interpret, rerun.

Every command writes a ``*.manifest.json`` next to its primary output with the
exact argument vector, resolved configuration, inputs, outputs, version and
duration; ``patchfool rerun <manifest>`` replays it.

Exit codes: 0 success, 1 operational failure (including an attack that did
not reach its goal), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (
    MODES,
    POLICIES,
    AttackConfig,
    AttackError,
    attack_universal,
    load_patch,
    run_attack_batch,
    save_patch,
)
from .data import SHAPES, LabeledImage, gen_dataset, load_dataset, save_dataset
from .imageio import ImageFormatError, read_image, render_heatmap, to_uint8, write_image
from .interpret import InvalidClassError, gradcam, occlusion_map
from .metrics import evaluate_suite
from .model import ModelFormatError, TrainingDivergedError, build_default_model, load_model, save_model, train

log = logging.getLogger("patchfool")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _rect(text: str) -> tuple[int, int, int, int]:
    try:
        parts = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x0,y0,w,h integers, got {text!r}") from None
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected x0,y0,w,h, got {text!r}")
    return parts


def _classes(text: str) -> tuple[str, ...]:
    names = tuple(c.strip() for c in text.split(",") if c.strip())
    bad = [c for c in names if c not in SHAPES]
    if not names or bad:
        raise argparse.ArgumentTypeError(f"classes must be drawn from {','.join(SHAPES)}")
    return names


def _class_names(dataset: list[LabeledImage]) -> list[str]:
    names: dict[int, str] = {}
    for im in dataset:
        names.setdefault(im.label, im.class_name or str(im.label))
    return [names.get(k, str(k)) for k in range(max(names) + 1)]


def _load_data(directory) -> list[LabeledImage]:
    directory = Path(directory)
    if not (directory / "manifest.jsonl").is_file():
        raise FileNotFoundError(f"{directory} has no manifest.jsonl")
    data = load_dataset(directory)
    if not data:
        raise UsageError(f"{directory} holds no images")
    return data


def _load_image(args) -> tuple[np.ndarray, int]:
    """The image to work on and its id (dataset index, or 0 for a loose file)."""
    if args.image:
        return read_image(args.image), 0
    if args.data is None:
        raise UsageError("give --image or --data with --index")
    data = _load_data(args.data)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} outside 0..{len(data) - 1}")
    return data[args.index].pixels, args.index


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> tuple[int, dict]:
    data = gen_dataset(args.n, args.classes, args.size, args.seed)
    manifest = save_dataset(args.out, data)
    return EXIT_OK, {"outputs": [str(manifest)], "primary": Path(args.out),
                     "config": {"n": args.n, "classes": list(args.classes), "size": args.size},
                     "seeds": {"seed": args.seed}}


def cmd_train(args) -> tuple[int, dict]:
    data = _load_data(args.data)
    heldout = _load_data(args.heldout) if args.heldout else None
    names = _class_names(data)
    size = data[0].pixels.shape[-1]
    model = build_default_model(len(names), seed=args.model_seed, class_names=names, image_size=size)
    report = train(model, data, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                   seed=args.seed, heldout=heldout, momentum=args.momentum)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    _write_json(report_path, report.to_dict())
    print(f"final held-out accuracy: {report.final_heldout_accuracy:.4f}")
    return EXIT_OK, {"outputs": [str(out), str(report_path)], "primary": out,
                     "config": {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
                                "momentum": args.momentum, "classes": names},
                     "seeds": {"seed": args.seed, "model_seed": args.model_seed}}


def _attack_config(args) -> AttackConfig:
    return AttackConfig.for_mode(
        args.mode, lam=args.lam, eta=args.eta, iterations=args.iterations,
        target_policy=args.target_policy, target=args.target, eps=args.eps,
        patch=args.patch, decoy=args.decoy, seed=args.seed,
        epochs=args.epochs, batch_size=args.batch_size,
    )


def _clamp_to_ball(adv: np.ndarray, clean: np.ndarray, eps: float) -> np.ndarray:
    """Quantize ``adv`` to 8 bits inside the eps-ball of the 8-bit ``clean``, and verify it."""
    ref = to_uint8(clean).astype(np.int64)
    k = int(np.floor(eps * 255.0 + 1e-6))
    q = np.clip(to_uint8(adv).astype(np.int64), ref - k, ref + k)
    out = (q.astype(np.float32) / 255.0).astype(np.float32)
    if np.max(np.abs(out - ref / 255.0)) > eps + 1e-6:
        raise RuntimeError("perturbed image leaves the eps-ball")
    return out


def cmd_attack(args) -> tuple[int, dict]:
    model = load_model(args.model)
    cfg = _attack_config(args)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    outputs = []
    if cfg.mode == "universal":
        if args.data is None or args.target is None:
            raise UsageError("universal mode needs --data (training split) and --target")
        if not 0 <= args.target < model.num_classes:
            raise UsageError(f"--target {args.target} outside 0..{model.num_classes - 1}")
        train_set = _load_data(args.data)
        heldout = _load_data(args.heldout) if args.heldout else None
        result = attack_universal(model, train_set, cfg, heldout)
        outputs += [str(p) for p in save_patch(prefix.with_name(prefix.name + ".patch"), result.patch,
                                               result.target, cfg.seed, cfg)]
        print(f"held-out target rate: {result.target_rate:.4f}")
    else:
        image, image_id = _load_image(args)
        if cfg.target is not None and not 0 <= cfg.target < model.num_classes:
            raise UsageError(f"--target {cfg.target} outside 0..{model.num_classes - 1}")
        try:
            result = run_attack_batch(model, image[None], cfg, [image_id])[0]
        except AttackError as exc:
            raise UsageError(str(exc)) from exc
        adv = result.adv_image
        if cfg.mode == "full-image":
            adv = _clamp_to_ball(adv, image, cfg.eps)
            result.final = int(model.predict(adv[None])[0])
            result.success = result.final == result.target
        else:
            outputs += [str(p) for p in save_patch(prefix.with_name(prefix.name + ".patch"), result.patch,
                                                   result.target, cfg.seed, cfg)]
        adv_path = prefix.with_name(prefix.name + ".adv.ppm")
        write_image(adv_path, adv)
        outputs.append(str(adv_path))
        interp_class = result.original if cfg.mode == "full-image" else (
            result.final if cfg.mode == "nontargeted" else result.target)
        for tag, img in (("before", image), ("after", adv)):
            path = prefix.with_name(f"{prefix.name}.{tag}.ppm")
            render_heatmap(path, gradcam(model, img, interp_class).values)
            outputs.append(str(path))
        print(f"original {result.original} target {result.target} final {result.final} success {result.success}")
    result_path = prefix.with_name(prefix.name + ".result.json")
    _write_json(result_path, result.to_dict())
    outputs.append(str(result_path))
    code = EXIT_OK if result.success else EXIT_FAIL
    return code, {"outputs": outputs, "primary": prefix, "config": cfg.to_dict(), "seeds": {"seed": cfg.seed}}


def cmd_evaluate(args) -> tuple[int, dict]:
    model = load_model(args.model)
    data = _load_data(args.data)
    cfg = None if args.mode == "none" else _attack_config(args)
    patch = None
    if args.mode == "universal":
        if not args.patch_file:
            raise UsageError("universal evaluation needs --patch-file (sidecar JSON)")
        patch, meta = load_patch(args.patch_file)
        cfg = AttackConfig.for_mode("universal", target=meta["target"], patch=patch.rect)
    report = evaluate_suite(model, data, cfg, method=args.method, jobs=args.jobs,
                            chunk_size=args.chunk_size, patch=patch)
    out = Path(args.out)
    _write_json(out, report.to_dict())
    table = report.to_table()
    table_path = out.with_suffix(".txt")
    _write_text(table_path, table)
    print(table, end="")
    return EXIT_OK, {"outputs": [str(out), str(table_path)], "primary": out,
                     "config": {"mode": args.mode, "method": args.method, "jobs": args.jobs,
                                "chunk_size": args.chunk_size,
                                "attack": None if cfg is None else cfg.to_dict()},
                     "seeds": {"seed": args.seed}}


def cmd_interpret(args) -> tuple[int, dict]:
    model = load_model(args.model)
    image, _ = _load_image(args)
    c = args.class_index
    if c is None:
        c = int(model.predict(image[None])[0])
    elif not 0 <= c < model.num_classes:
        raise UsageError(f"--class {c} outside 0..{model.num_classes - 1}")
    if args.method == "gradcam":
        heat = gradcam(model, image, c)
    else:
        heat = occlusion_map(model, image, c, args.occluder, args.stride)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    render_heatmap(out, heat.values)
    print(f"class {c} degenerate {heat.degenerate}")
    return EXIT_OK, {"outputs": [str(out)], "primary": out,
                     "config": {"class": c, "method": args.method}, "seeds": {}}


# ---------------------------------------------------------------- parser


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, help="heatmap weight (mode default if omitted)")
    p.add_argument("--eta", type=float, help="sign-step size")
    p.add_argument("--iterations", type=int)
    p.add_argument("--target-policy", choices=POLICIES, default="step-rnd")
    p.add_argument("--target", type=int)
    p.add_argument("--eps", type=float, help="full-image L-inf budget (default 8/255)")
    p.add_argument("--patch", type=_rect, help="patch rectangle x0,y0,w,h (default top-left)")
    p.add_argument("--decoy", type=_rect, help="decoy rectangle x0,y0,w,h (default top-right)")
    p.add_argument("--epochs", type=int, default=4, help="universal mode passes over the data")
    p.add_argument("--batch-size", type=int, default=32, help="universal mode batch size")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchfool", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--classes", type=_classes, default=SHAPES)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the default CNN")
    p.add_argument("--data", required=True)
    p.add_argument("--heldout")
    p.add_argument("--out", required=True, help="model file (SFM1)")
    p.add_argument("--report", help="TrainReport JSON (default <out>.report.json)")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0, help="shuffling seed")
    p.add_argument("--model-seed", type=int, default=0, help="weight initialization seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="optimize an adversarial patch or perturbation")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=MODES, default="targeted")
    p.add_argument("--image", help="P6 image")
    p.add_argument("--data", help="dataset directory (image source, or training split in universal mode)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--heldout", help="universal mode held-out dataset")
    p.add_argument("--out", required=True, help="output prefix")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="attack a dataset and score the interpretations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("none",) + MODES, default="targeted")
    p.add_argument("--method", choices=("gradcam", "occlusion"), default="gradcam")
    p.add_argument("--patch-file", help="universal patch sidecar JSON")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--chunk-size", type=int, default=25)
    p.add_argument("--out", required=True, help="report JSON (table written next to it as .txt)")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("interpret", help="render a heatmap")
    p.add_argument("--model", required=True)
    p.add_argument("--image")
    p.add_argument("--data")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--class", dest="class_index", type=int, help="default: predicted class")
    p.add_argument("--method", choices=("gradcam", "occlusion"), default="gradcam")
    p.add_argument("--occluder", type=int, default=11)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--out", required=True, help=".pgm for grayscale, .ppm for colour")
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=None)
    return parser


def _manifest_path(primary: Path) -> Path:
    primary = Path(primary)
    return primary.with_name(primary.name + ".manifest.json")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "rerun":
        try:
            recorded = json.loads(Path(args.manifest).read_text(encoding="utf-8"))["argv"]
        except (OSError, ValueError, KeyError) as exc:
            print(f"patchfool: cannot read manifest: {exc}", file=sys.stderr)
            return EXIT_FAIL
        return main(recorded)

    start = time.perf_counter()
    try:
        code, info = args.func(args)
    except (UsageError, InvalidClassError, AttackError) as exc:
        print(f"patchfool: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ImageFormatError, ModelFormatError, TrainingDivergedError, RuntimeError, ValueError) as exc:
        print(f"patchfool: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    manifest = {
        "command": args.command,
        "argv": argv,
        "config": info.get("config", {}),
        "seeds": info.get("seeds", {}),
        "inputs": {k: getattr(args, k) for k in ("data", "heldout", "model", "image", "patch_file")
                   if getattr(args, k, None)},
        "outputs": info.get("outputs", []),
        "version": __version__,
        "duration_s": round(time.perf_counter() - start, 3),
        "exit_code": code,
    }
    _write_json(_manifest_path(info["primary"]), manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
