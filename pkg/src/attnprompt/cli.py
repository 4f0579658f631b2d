"""Command-line client for the attnprompt service.

Each subcommand assembles a request model from an optional YAML config file
plus overriding flags, then dispatches it: by default straight to the
in-process service handlers (no server needed), or to a running server when
``--server URL`` is given. Every run writes a machine-readable summary record
next to its outputs and prints the response as JSON.

Exit codes: 0 on success, 1 on any runtime or configuration error, 2 on
usage errors (unknown command/flag, missing required flag).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import pydantic
import yaml

from . import __version__
from .errors import PromptError
from .service import handlers, schemas

_ENDPOINTS = {
    "synth-data": "/synth-data",
    "train": "/train",
    "eval-gain": "/eval/gain",
    "eval-hits": "/eval/hits",
    "eval-keypoints": "/eval/keypoints",
    "baseline": "/baseline",
    "render": "/render",
}

_HANDLERS = {
    "synth-data": (handlers.handle_synth_data, schemas.SynthDataResponse),
    "train": (handlers.handle_train, schemas.TrainResponse),
    "eval-gain": (handlers.handle_eval_gain, schemas.GainResponse),
    "eval-hits": (handlers.handle_eval_hits, schemas.HitsResponse),
    "eval-keypoints": (handlers.handle_eval_keypoints, schemas.KeypointsResponse),
    "baseline": (handlers.handle_baseline, schemas.BaselineResponse),
    "render": (handlers.handle_render, schemas.RenderResponse),
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if value is None:
            continue
        if isinstance(value, dict):
            out[key] = _deep_merge(out.get(key, {}) or {}, value)
        else:
            out[key] = value
    return out


def _run_config(args, overrides: dict) -> schemas.RunConfig:
    data: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            data = yaml.safe_load(f) or {}
    common = {
        "data": {"manifest": getattr(args, "manifest", None)},
        "output_dir": getattr(args, "out", None),
    }
    return schemas.RunConfig.model_validate(_deep_merge(_deep_merge(data, common), overrides))


def _dispatch(args, command: str, request) -> int:
    if getattr(args, "server", None):
        import httpx

        url = args.server.rstrip("/") + _ENDPOINTS[command]
        reply = httpx.post(url, json=request.model_dump(), timeout=None)
        if reply.status_code != 200:
            print(f"error: server returned {reply.status_code}: {reply.text}", file=sys.stderr)
            return 1
        _, response_cls = _HANDLERS[command]
        response = response_cls.model_validate(reply.json())
    else:
        handler, _ = _HANDLERS[command]
        response = handler(request)

    if command == "synth-data":
        summary_dir = Path(request.out_dir)
    else:
        summary_dir = Path(request.config.output_dir)
    summary_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "request": request.model_dump(),
        "response": response.model_dump(),
    }
    with open(summary_dir / f"summary-{command}.json", "w") as f:
        json.dump(record, f, indent=2)
    print(json.dumps(response.model_dump(), indent=2))
    return 0


def _cmd_synth_data(args) -> int:
    request = schemas.SynthDataRequest(
        out_dir=args.out,
        count=args.count,
        n=args.n,
        seed=args.seed,
        labels_dim=args.labels_dim,
    )
    return _dispatch(args, "synth-data", request)


def _cmd_train(args) -> int:
    overrides = {
        "train": {
            "seed": args.seed,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "learning_rate": args.lr,
            "k_locations": args.k,
        }
    }
    config = _run_config(args, overrides)
    return _dispatch(args, "train", schemas.TrainRequest(config=config))


def _cmd_eval_gain(args) -> int:
    config = _run_config(args, {})
    request = schemas.GainRequest(
        config=config, checkpoint=args.checkpoint, placements=args.placements, seed=args.seed
    )
    return _dispatch(args, "eval-gain", request)


def _cmd_eval_hits(args) -> int:
    config = _run_config(args, {})
    request = schemas.HitsRequest(
        config=config, checkpoint=args.checkpoint, trials=args.trials, seed=args.seed
    )
    return _dispatch(args, "eval-hits", request)


def _cmd_eval_keypoints(args) -> int:
    config = _run_config(args, {})
    request = schemas.KeypointsRequest(
        config=config, checkpoint=args.checkpoint, labels_path=args.labels
    )
    return _dispatch(args, "eval-keypoints", request)


def _cmd_baseline(args) -> int:
    config = _run_config(args, {})
    request = schemas.BaselineRequest(
        config=config,
        kind=args.kind,
        image_index=args.image_index,
        center_i=args.center_i,
        center_j=args.center_j,
        size=args.size,
        seed=args.seed,
    )
    return _dispatch(args, "baseline", request)


def _cmd_render(args) -> int:
    config = _run_config(args, {})
    request = schemas.RenderRequest(
        config=config,
        checkpoint=args.checkpoint,
        image_index=args.image_index,
        i=args.i,
        j=args.j,
        seed=args.seed,
    )
    return _dispatch(args, "render", request)


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnprompt",
        description="Train and evaluate attention-steering visual prompts.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run configuration")
            p.add_argument("--manifest", help="override data.manifest")
            p.add_argument("--out", help="override output_dir")
        p.add_argument("--server", help="dispatch to a running service at this URL")

    p = sub.add_parser("synth-data", help="generate the bundled synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels-dim", type=int, default=None,
                   help="also write stub label embeddings of this dimension")
    common(p, config=False)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="optimize a prompt against a frozen encoder")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--k", type=int, default=None, help="placements per image")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-gain", help="per-layer relative attention gain")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--placements", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_eval_gain)

    p = sub.add_parser("eval-hits", help="argmax localization hit rate")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_eval_hits)

    p = sub.add_parser("eval-keypoints", help="keypoint naming accuracy")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels", required=True, help="label embedding file (safetensors)")
    p.set_defaults(func=_cmd_eval_keypoints)

    p = sub.add_parser("baseline", help="apply a baseline transform and probe attention")
    common(p)
    p.add_argument("--kind", required=True, choices=["random_loc", "crop", "blur", "red_circle"])
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--center-i", type=int, default=None)
    p.add_argument("--center-j", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("render", help="render prompt, prompted image and heatmaps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--i", type=int, default=None)
    p.add_argument("--j", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except pydantic.ValidationError as exc:
        print(f"error: invalid configuration:\n{exc}", file=sys.stderr)
        return 1
    except PromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
