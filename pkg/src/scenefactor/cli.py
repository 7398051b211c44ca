"""Command-line interface.

Subcommands: generate, train, eval (ari | probe), traverse, crossover,
compose, sweep, gradcheck. Every score-producing command prints one
machine-readable JSON line (prefixed ``RESULT``) plus a human summary.
"""

import argparse
import json
import os
import sys

import numpy as np


def _add_generate(sub):
    p = sub.add_parser("generate", help="generate a synthetic video dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--sprites", type=int, default=3)
    p.add_argument("--moving", type=int, default=1)
    p.add_argument("--pan-limit", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--events", action="store_true",
                   help="allow one mid-sequence velocity change per scene")
    p.add_argument("--out", required=True)


def _add_train(sub):
    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="config file (defaults to the desk preset)")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--quiet", action="store_true")


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    kind = p.add_subparsers(dest="eval_kind", required=True)
    a = kind.add_parser("ari", help="foreground segmentation score")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--mode", choices=("static", "video"), required=True)
    a.add_argument("--out", help="write the JSON record here as well")
    b = kind.add_parser("probe", help="R^2 of a regressor on frozen latents")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--target", choices=("camera", "object"), required=True)
    b.add_argument("--input", required=True,
                   choices=("frame", "object", "object+t", "object+frame+t", "complement"))
    b.add_argument("--regressor", choices=("linear", "mlp"), required=True)
    b.add_argument("--train-fraction", type=float, default=0.8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="write the JSON record here as well")


def _add_analysis(sub):
    t = sub.add_parser("traverse", help="latent traversal image grid")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--scene", type=int, default=0)
    t.add_argument("--slot", type=int, default=0)
    t.add_argument("--dim", type=int, default=-1,
                   help="latent dim; -1 picks the top dim by marginal KL")
    t.add_argument("--offsets", default="-3,-1.5,0,1.5,3")
    t.add_argument("--scope", choices=("object", "frame"), default="object")
    t.add_argument("--out", required=True)

    c = sub.add_parser("crossover", help="object latents of A under frame latents of B")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--scene-a", type=int, required=True)
    c.add_argument("--scene-b", type=int, required=True)
    c.add_argument("--out", required=True)

    m = sub.add_parser("compose", help="compose object latents from several scenes")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--select", required=True,
                   help='slot selection, e.g. "0:1,2;3:0" (scene:slots;scene:slots)')
    m.add_argument("--frames-from", type=int, required=True)
    m.add_argument("--out", required=True)

    s = sub.add_parser("sweep", help="decode a pose sweep from a vs-mode checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scene", type=int, default=0)
    s.add_argument("--poses", default="-0.2:0.2:7",
                   help="x-axis pan sweep start:stop:count (y fixed at 0)")
    s.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vs", action="store_true", help="check the pose-conditioned variant")
    g.add_argument("--max-coords", type=int, default=None,
                   help="cap on coordinates checked per parameter")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenefactor",
        description="Factorized-latent variational video scene decomposition")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_generate(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_analysis(sub)
    return parser


def _emit(record: dict, out_path=None, summary: str = ""):
    print("RESULT " + json.dumps(record))
    if summary:
        print(summary)
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(record, fh, indent=2)


def _cmd_generate(args) -> int:
    from .seqio import write_dataset
    from .synth import generate_dataset
    sequences = generate_dataset(
        args.scenes, seed=args.seed, frame_count=args.frames, frame_size=args.size,
        num_sprites=args.sprites, num_moving=args.moving, pan_limit=args.pan_limit,
        allow_event=args.events)
    write_dataset(sequences, args.out)
    print(f"wrote {args.scenes} scenes "
          f"({args.frames}x{args.size}x{args.size}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .configs import PRESETS, load_train_config
    from .training import train
    config = PRESETS[args.preset]()
    if args.config:
        config = load_train_config(args.config, base=config)
    config.data_path = args.data
    config.out_dir = args.out
    if args.steps is not None:
        config.steps = args.steps
    result = train(config, resume_from=args.resume, progress=not args.quiet)
    print(f"finished {result.steps_run} steps; checkpoint: {result.checkpoint_path}; "
          f"log: {result.log_path}")
    if result.final_parts:
        print(f"final loss parts: {result.final_parts}")
    return 0


def _load_for_eval(ckpt_path, data_path):
    from .metrics import collect_latents
    from .seqio import read_dataset
    from .training import load_model
    model, config, step = load_model(ckpt_path)
    sequences = read_dataset(data_path)
    return model, config, step, sequences, collect_latents(model, sequences)


def _cmd_eval_ari(args) -> int:
    from .metrics import ari_f_dataset
    _, _, step, sequences, latents = _load_for_eval(args.ckpt, args.data)
    scores = ari_f_dataset(sequences, list(latents.segmentations), args.mode)
    record = {"kind": "ari", "mode": args.mode, "ckpt_step": step,
              "mean": scores["mean"], "pooled": scores["pooled"],
              "num_scenes": scores["num_scenes"]}
    _emit(record, args.out,
          f"ARI-F ({args.mode}) over {scores['num_scenes']} scenes: "
          f"mean {scores['mean']:.4f}, pooled {scores['pooled']:.4f}")
    return 0


def _cmd_eval_probe(args) -> int:
    from .metrics import camera_probe_data, object_probe_data, run_probe
    model, _, step, sequences, latents = _load_for_eval(args.ckpt, args.data)
    n = latents.object_means.shape[0]
    rng = np.random.Generator(np.random.PCG64(args.seed))
    order = rng.permutation(n)
    n_train = max(1, min(n - 1, int(round(n * args.train_fraction))))
    train_idx, eval_idx = order[:n_train], order[n_train:]

    def subset(idx):
        import dataclasses
        return dataclasses.replace(
            latents,
            object_means=latents.object_means[idx],
            frame_means=None if latents.frame_means is None else latents.frame_means[idx],
            cameras=latents.cameras[idx], weights=latents.weights[idx],
            segmentations=latents.segmentations[idx], true_masks=latents.true_masks[idx],
            sprite_positions=latents.sprite_positions[idx], moving=latents.moving[idx])

    builder = camera_probe_data if args.target == "camera" else object_probe_data
    x_train, y_train = builder(subset(train_idx), args.input)
    x_eval, y_eval = builder(subset(eval_idx), args.input)
    result = run_probe(x_train, y_train, x_eval, y_eval,
                       regressor=args.regressor, seed=args.seed)
    record = {"kind": "probe", "target": args.target, "input": args.input,
              "regressor": args.regressor, "ckpt_step": step,
              "r2_train": result.r2_train, "r2_eval": result.r2_eval,
              "n_train": len(x_train), "n_eval": len(x_eval)}
    _emit(record, args.out,
          f"probe {args.regressor}({args.input}) -> {args.target}: "
          f"train R^2 {result.r2_train:.4f}, eval R^2 {result.r2_eval:.4f}")
    return 0


def _cmd_traverse(args) -> int:
    from .analysis import LatentEdit, rank_dims_by_kl, traverse
    from .seqio import read_dataset
    from .training import load_model
    model, _, _ = load_model(args.ckpt)
    sequences = read_dataset(args.data)
    seq = sequences[args.scene]
    dim = args.dim
    if dim < 0:
        from .analysis import encode_means
        post, _, _ = encode_means(model, seq)
        if args.scope == "object":
            ranked = rank_dims_by_kl(post.object_mean.numpy(),
                                     post.object_log_scale.numpy())
        else:
            ranked = rank_dims_by_kl(post.frame_mean.numpy(),
                                     post.frame_log_scale.numpy())
        dim = int(ranked[0])
    offsets = [float(v) for v in args.offsets.split(",")]
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out,
                       f"traverse_scene{args.scene}_{args.scope}{args.slot}_dim{dim}.png")
    edit = LatentEdit(slot=args.slot, dim=dim, offsets=offsets, scope=args.scope)
    result = traverse(model, seq, edit, path=out)
    print(f"wrote {out} ({result.grid.grid.shape[0]}x{result.grid.grid.shape[1]}), "
          f"offsets {offsets}, dim {dim}")
    return 0


def _cmd_crossover(args) -> int:
    from .analysis import crossover
    from .seqio import read_dataset
    from .training import load_model
    model, _, _ = load_model(args.ckpt)
    sequences = read_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, f"crossover_{args.scene_a}_x_{args.scene_b}.png")
    crossover(model, sequences[args.scene_a], sequences[args.scene_b], path=out)
    print(f"wrote {out} (rows: reconstruction A, crossover, crossover segmentation)")
    return 0


def _parse_selection(text: str):
    selections = []
    for part in text.split(";"):
        scene, slots = part.split(":")
        selections.append((int(scene), [int(s) for s in slots.split(",") if s != ""]))
    return selections


def _cmd_compose(args) -> int:
    from .analysis import compose_scene
    from .seqio import read_dataset
    from .training import load_model
    model, _, _ = load_model(args.ckpt)
    sequences = read_dataset(args.data)
    selections = [(sequences[i], slots) for i, slots in _parse_selection(args.select)]
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "compose.png")
    compose_scene(model, selections, sequences[args.frames_from], path=out)
    print(f"wrote {out} (rows: reconstruction, segmentation)")
    return 0


def _cmd_sweep(args) -> int:
    from .analysis import view_sweep_vs
    from .seqio import read_dataset
    from .training import load_model
    model, _, _ = load_model(args.ckpt)
    sequences = read_dataset(args.data)
    start, stop, count = args.poses.split(":")
    xs = np.linspace(float(start), float(stop), int(count))
    poses = np.stack([xs, np.zeros_like(xs)], axis=1)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, f"sweep_scene{args.scene}.png")
    view_sweep_vs(model, sequences[args.scene], poses, path=out)
    print(f"wrote {out} ({len(xs)} poses from {start} to {stop})")
    return 0


def _cmd_gradcheck(args) -> int:
    from .training import gradcheck, tiny_gradcheck_config
    cfg = tiny_gradcheck_config()
    if args.vs:
        cfg.vs_mode = True
    report, passed = gradcheck(cfg, seed=args.seed,
                               max_coords_per_param=args.max_coords)
    worst = max(report.items(), key=lambda kv: kv[1][0])
    for name, (err, checked) in sorted(report.items()):
        print(f"{name:60s} max_rel_err {err:.3e} over {checked} coords")
    print(f"worst: {worst[0]} ({worst[1][0]:.3e}); {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "generate": _cmd_generate,
        "train": _cmd_train,
        "traverse": _cmd_traverse,
        "crossover": _cmd_crossover,
        "compose": _cmd_compose,
        "sweep": _cmd_sweep,
        "gradcheck": _cmd_gradcheck,
    }
    if args.command == "eval":
        handler = _cmd_eval_ari if args.eval_kind == "ari" else _cmd_eval_probe
    else:
        handler = handlers[args.command]
    try:
        return handler(args)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
