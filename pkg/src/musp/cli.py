"""Command-line entry point: ``musp gen|train|embed|eval|attn-dump|ablate``.

Every option can also be given in a ``key = value`` config file passed with
``--config``; options on the command line take precedence over the file.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import io
from .autograd import ShapeError
from .cam import distance_matrix
from .functional import ConfigError
from .metrics import evaluate
from .model import MUSPNet
from .synth import DataConfig, build_corpus, resize_nearest
from .trainer import (
    ABLATION_AXES,
    DivergenceError,
    RunConfig,
    TrainResult,
    format_ablation,
    records_from_embeddings,
    run_ablation,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "query", "gallery", "test", "all")



class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


@dataclass(frozen=True)
class Option:
    name: str
    kind: Any
    default: Any
    help: str = ""


GEN_OPTIONS = [
    Option("out_dir", str, None, "directory to write images and manifest.txt into"),
    Option("identities", int, 48, "total identities; one third become test identities"),
    Option("images_per_id", int, 20, "images rendered per identity"),
    Option("queries_per_id", int, 4, "query images per test identity"),
    Option("size", int, 64, "image side in pixels"),
    Option("seed", int, 0, "generator seed"),
]
TRAIN_OPTIONS = [
    Option("data_dir", str, None, "dataset directory written by 'musp gen'"),
    Option("out_checkpoint", str, None, "checkpoint path"),
    Option("log_path", str, "", "training log path (default: <checkpoint>.log)"),
]
EMBED_OPTIONS = [
    Option("checkpoint", str, None, "checkpoint path"),
    Option("data_dir", str, None, "dataset directory"),
    Option("split", str, "test", "one of " + ", ".join(SPLITS)),
    Option("out_embeddings", str, None, "embedding file to write"),
]
EVAL_OPTIONS = [
    Option("query_embeddings", str, None, "query embedding file"),
    Option("gallery_embeddings", str, None, "gallery embedding file"),
    Option("report_path", str, "", "where to write the report (stdout always)"),
    Option("exclude_self", bool, False, "drop gallery item i for query i (query file = gallery file)"),
    Option("camera_filter", bool, True, "drop gallery items sharing identity and camera with the query"),
]
ATTN_OPTIONS = [
    Option("checkpoint", str, None, "checkpoint path"),
    Option("image_path", str, "", "PPM image to inspect"),
    Option("data_dir", str, "", "dataset directory (used with --index)"),
    Option("index", int, 0, "manifest line of the image when --data-dir is given"),
    Option("out_dir", str, None, "directory for attn_<k>.pgm files"),
]
ABLATE_OPTIONS = [
    Option("axis", str, None, "one of " + ", ".join(ABLATION_AXES)),
    Option("data_dir", str, None, "dataset directory"),
    Option("seeds", tuple[int, ...], (0, 1, 2), "comma-separated seeds"),
    Option("report_path", str, "", "where to write the table (stdout always)"),
]


def _run_options() -> list[Option]:
    schema = io.config_schema(RunConfig)
    defaults = RunConfig()
    return [Option(f.name, schema[f.name], getattr(defaults, f.name)) for f in dataclasses.fields(RunConfig)]


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_options(parser: argparse.ArgumentParser, options: Sequence[Option]) -> None:
    for opt in options:
        # every option defaults to None so that unset flags fall through to the config file
        if opt.kind is bool:
            parser.add_argument(_flag(opt.name), dest=opt.name, type=_parse_bool, default=None,
                                nargs="?", const=True, metavar="BOOL", help=opt.help)
        elif typing.get_origin(opt.kind) is tuple:
            parser.add_argument(_flag(opt.name), dest=opt.name, default=None, metavar="A,B,...", help=opt.help)
        else:
            parser.add_argument(_flag(opt.name), dest=opt.name, type=opt.kind, default=None, help=opt.help)


def _parse_bool(text: str) -> bool:
    return io._parse_value("flag", text, bool)


def resolve(args: argparse.Namespace, options: Sequence[Option]) -> dict[str, Any]:
    """Defaults, then the config file, then explicit command-line flags."""
    schema = {o.name: o.kind for o in options}
    values = {o.name: o.default for o in options}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(io.parse_config_text(path.read_text(), schema))
    for opt in options:
        given = getattr(args, opt.name)
        if given is not None:
            if typing.get_origin(opt.kind) is tuple:
                given = io._parse_value(opt.name, given, opt.kind)
            values[opt.name] = given
    missing = [o.name for o in options if values[o.name] is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join(_flag(m) for m in missing))
    return values


def _split_run(values: dict[str, Any]) -> tuple[RunConfig, dict[str, Any]]:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    return RunConfig(**{k: v for k, v in values.items() if k in names}), {
        k: v for k, v in values.items() if k not in names
    }


def _print_effective(config: RunConfig) -> None:
    print("# effective configuration", file=sys.stderr)
    sys.stderr.write(io.format_config(config))


def _require_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"data directory not found: {p}")
    return p


# -- checkpoints ----------------------------------------------------------------

CKPT_EXTRA = {"num_classes": int, "class_ids": tuple[int, ...]}


def save_model(path, result: TrainResult) -> None:
    text = io.format_config(
        result.config,
        extra={"num_classes": len(result.class_ids), "class_ids": tuple(result.class_ids)},
    )
    io.write_checkpoint(path, text, result.model.state())


def load_model(path) -> tuple[MUSPNet, RunConfig]:
    text, state = io.read_checkpoint(path)
    values = io.parse_config_text(text, {**io.config_schema(RunConfig), **CKPT_EXTRA})
    num_classes = values.pop("num_classes")
    values.pop("class_ids", None)
    config = RunConfig(**values)
    model = MUSPNet(config.model_config(num_classes), np.random.default_rng(0))
    try:
        model.load_state(state)
    except (KeyError, ValueError) as exc:
        raise io.FormatError(f"checkpoint {path} does not match its config: {exc}") from None
    extra = sorted(set(state) - set(model.state()))
    if extra:
        raise io.FormatError(f"checkpoint {path} has unexpected entries: {extra}")
    model.eval()
    return model, config


# -- commands -------------------------------------------------------------------

def cmd_gen(values: dict[str, Any]) -> int:
    config = DataConfig.from_total(
        values["identities"],
        images_per_identity=values["images_per_id"],
        size=values["size"],
        queries_per_identity=values["queries_per_id"],
        seed=values["seed"],
    )
    corpus = build_corpus(config)
    io.write_dataset(values["out_dir"], corpus)
    print(f"wrote {len(corpus)} images to {values['out_dir']}")
    return EXIT_OK


def _format_train_log(result: TrainResult) -> str:
    lines = ["# epoch mean_total mean_id mean_triplet mean_diversity"]
    by_epoch: dict[int, list] = {}
    for s in result.steps:
        by_epoch.setdefault(s.epoch, []).append((s.total, s.id, s.triplet, s.diversity))
    for epoch, rows in sorted(by_epoch.items()):
        means = np.mean(rows, axis=0)
        lines.append(f"epoch {epoch + 1} " + " ".join(f"{m:.6f}" for m in means))
    for ev in result.evals:
        div = "-" if ev.heldout_diversity is None else f"{ev.heldout_diversity:.6f}"
        r = ev.report
        lines.append(f"eval {ev.epoch} mAP {r.mAP:.6f} CMC@1 {r.cmc1:.6f} CMC@5 {r.cmc5:.6f} diversity {div}")
    return "\n".join(lines) + "\n"


def cmd_train(values: dict[str, Any]) -> int:
    config, rest = _split_run(values)
    _print_effective(config)
    corpus = io.read_dataset(_require_dir(rest["data_dir"]))
    result = train(config, corpus, config.seed)
    save_model(rest["out_checkpoint"], result)
    log_path = rest["log_path"] or rest["out_checkpoint"] + ".log"
    Path(log_path).write_text(_format_train_log(result))
    final = result.final
    if final is not None:
        print(final.report.as_text(), end="")
    print(f"checkpoint written to {rest['out_checkpoint']}")
    return EXIT_OK


def _select(corpus, split: str):
    if split == "all":
        return corpus
    if split == "test":
        return corpus.subset(("query", "gallery"))
    return corpus.subset(split)


def embedding_dims(config: RunConfig) -> tuple[int, int, int]:
    """(n-1, c, g) of the embedding file written for ``config``."""
    if config.baseline:
        return 0, config.d, config.d
    return config.n - 1, config.c, config.d


def cmd_embed(values: dict[str, Any]) -> int:
    if values["split"] not in SPLITS:
        raise UsageError(f"unknown split {values['split']!r}; accepted: {', '.join(SPLITS)}")
    model, config = load_model(values["checkpoint"])
    corpus = _select(io.read_dataset(_require_dir(values["data_dir"])), values["split"])
    k, c, g = embedding_dims(config)
    if len(corpus):
        emb = model.embed(corpus.images)
        emb["parts"] = emb["parts"].reshape(len(corpus), k, c)
        records = records_from_embeddings(emb, corpus.identities)
    else:
        records = []
    io.write_embeddings(values["out_embeddings"], records, k, c, g)
    print(f"wrote {len(records)} embeddings to {values['out_embeddings']}")
    return EXIT_OK


def cmd_eval(values: dict[str, Any]) -> int:
    queries, *qdims = io.read_embeddings(values["query_embeddings"])
    gallery, *gdims = io.read_embeddings(values["gallery_embeddings"])
    if qdims != gdims:
        raise io.FormatError(f"query dimensions {tuple(qdims)} differ from gallery {tuple(gdims)}")
    exclude = None
    if values["exclude_self"]:
        if len(queries) != len(gallery):
            raise UsageError("--exclude-self needs query and gallery files of equal length")
        exclude = np.eye(len(queries), dtype=bool)
    q_cams = [r.camera for r in queries]
    g_cams = [r.camera for r in gallery]
    use_cams = values["camera_filter"] and None not in q_cams and None not in g_cams
    report = evaluate(
        distance_matrix(queries, gallery),
        [r.identity for r in queries],
        [r.identity for r in gallery],
        q_cams if use_cams else None,
        g_cams if use_cams else None,
        exclude,
    )
    if not np.isfinite([report.mAP, report.cmc1, report.cmc5]).all():
        raise FloatingPointError("non-finite metric values")
    text = report.as_text()
    if values["report_path"]:
        Path(values["report_path"]).write_text(text)
    print(text, end="")
    return EXIT_OK


def attention_maps(model: MUSPNet, image: np.ndarray) -> np.ndarray:
    """All n attention channels for one image, nearest-neighbour upscaled to the input size: (n, s, s)."""
    if model.attention is None:
        raise ConfigError("baseline checkpoints have no attention maps")
    emb = model.embed(image[None])
    attn = emb["attention"][0]  # (h, w, n)
    size = model.config.input_size
    return np.stack([resize_nearest(attn[..., k:k + 1], size)[..., 0] for k in range(attn.shape[-1])])


def cmd_attn_dump(values: dict[str, Any]) -> int:
    model, config = load_model(values["checkpoint"])
    if values["image_path"]:
        image = io.read_ppm(values["image_path"])
    elif values["data_dir"]:
        corpus = io.read_dataset(_require_dir(values["data_dir"]))
        if not 0 <= values["index"] < len(corpus):
            raise UsageError(f"--index {values['index']} outside dataset of {len(corpus)} images")
        image = corpus.images[values["index"]]
    else:
        raise UsageError("give --image-path or --data-dir with --index")
    if image.shape[:2] != (config.input_size, config.input_size):
        image = resize_nearest(image, config.input_size)
    maps = attention_maps(model, image)
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(maps):
        io.write_pgm(out / f"attn_{k}.pgm", m)
    print(f"wrote {len(maps)} attention maps to {out} (attn_{len(maps) - 1}.pgm is the background channel)")
    return EXIT_OK


def cmd_ablate(values: dict[str, Any]) -> int:
    config, rest = _split_run(values)
    if rest["axis"] not in ABLATION_AXES:
        raise UsageError(f"unknown axis {rest['axis']!r}; accepted: {', '.join(ABLATION_AXES)}")
    _print_effective(config)
    corpus = io.read_dataset(_require_dir(rest["data_dir"]))
    rows = run_ablation(config, rest["axis"], corpus, seeds=rest["seeds"])
    text = format_ablation(rest["axis"], rows)
    if rest["report_path"]:
        Path(rest["report_path"]).write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[[dict], int], Callable[[], list[Option]], str]] = {
    "gen": (cmd_gen, lambda: GEN_OPTIONS, "render a synthetic dataset"),
    "train": (cmd_train, lambda: TRAIN_OPTIONS + _run_options(), "train a model and write a checkpoint"),
    "embed": (cmd_embed, lambda: EMBED_OPTIONS, "write embeddings for a dataset split"),
    "eval": (cmd_eval, lambda: EVAL_OPTIONS, "score query embeddings against a gallery"),
    "attn-dump": (cmd_attn_dump, lambda: ATTN_OPTIONS, "write attention maps as PGM images"),
    "ablate": (cmd_ablate, lambda: ABLATE_OPTIONS + _run_options(), "run an ablation sweep"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="musp", description="Part-attentive re-identification on synthetic vehicles.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, options, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="key = value config file")
        _add_options(p, options())
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        handler, options, _ = COMMANDS[args.command]
        return handler(resolve(args, options()))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.ConfigKeyError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, io.FormatError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
