"""``protchat`` command line: precompute, pretrain, align, tune, eval, chat.

Exit codes: 0 ok, 1 usage, 2 parse/validation, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ProtChatError

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="YAML run config (default: $PROTCHAT_CONFIG)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set tune.steps=200")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="protchat", description="Multi-level protein encoders, PLP-former and a toy chat decoder.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("precompute", help="encode proteins into .pemb files plus a manifest")
    _common(p)
    p.add_argument("--fasta", action="append", default=[], type=Path)
    p.add_argument("--pdb", action="append", default=[], type=Path)
    p.add_argument("--chain", help="chain id for every --pdb input")
    p.add_argument("--out-dir", type=Path, help="default: <output_dir>/embeddings")

    for name, helptext in (
        ("pretrain", "stage 1: PLP-former with PTC + PTG + PTM"),
        ("align", "stage 2: context gating and tertiary projector"),
        ("tune", "stage 3: projection adapters (decoder frozen unless decoder.unfreeze)"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--resume", action="store_true", help="continue from the stage checkpoint")

    p = sub.add_parser("eval", help="captioning, QA exact match and retrieval report")
    _common(p)
    p.add_argument("--split", choices=("train", "eval", "all"))

    p = sub.add_parser("chat", help="ask questions about one protein")
    _common(p)
    p.add_argument("--protein", type=Path, help="FASTA, PDB or .pemb file")
    p.add_argument("--chain")
    p.add_argument("--once", metavar="QUESTION", help="answer one question and exit")
    return ap


def _print_summary(summary: dict) -> None:
    for k, v in summary.items():
        if isinstance(v, (dict, list)):
            continue
        print(f"{k}\t{v}")


def cmd_precompute(args, cfg) -> int:
    from .autodiff.checkpoint import atomic_write_bytes
    from .corpus import parse_fasta, parse_pdb_chain
    from .encoders import EncoderSpec, encode, encode_embeddings
    from .errors import ContractError
    from .pipeline import load_corpus, write_manifest

    # parse everything before writing anything
    seqs = []
    for path in args.fasta:
        seqs.extend(parse_fasta(path.read_bytes(), source=str(path)))
    if args.pdb and not args.chain:
        raise ContractError("--pdb needs --chain")
    for path in args.pdb:
        seqs.append(parse_pdb_chain(path.read_bytes(), args.chain, source=str(path), protein_id=f"{path.stem}_{args.chain}"))
    if not args.fasta and not args.pdb:
        seqs = [r.sequence for r in load_corpus(cfg).records]
    ids = [s.id for s in seqs]
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate protein ids among inputs")
    out_dir = args.out_dir or cfg.out / "embeddings"
    e = cfg.encoder
    spec = EncoderSpec("stub", e.seed, c_seq=e.c_seq, c_ter=e.c_ter)
    encoded = [(s.id, encode_embeddings(encode(s, spec, e.max_len, e.trim_seed))) for s in seqs]
    entries = []
    for rid, blob in encoded:
        atomic_write_bytes(out_dir / f"{rid}.pemb", blob)
        entries.append((rid, f"{rid}.pemb"))
    write_manifest(out_dir / "manifest.tsv", entries)
    print(f"proteins\t{len(entries)}\nmanifest\t{out_dir / 'manifest.tsv'}")
    return EXIT_OK


def cmd_chat(args, cfg) -> int:
    from .pipeline import answer_question, encode_protein_file, load_models, protein_prompt_inputs

    models = load_models(cfg, upto="tune")

    def load(path: Path):
        pid, emb = encode_protein_file(cfg, path, args.chain)
        return pid, protein_prompt_inputs(models, emb)

    if args.once is not None:
        if args.protein is None:
            print("protchat chat: --once needs --protein", file=sys.stderr)
            return EXIT_USAGE
        _, (e_align, e_ter) = load(args.protein)
        _, text, truncated = answer_question(cfg, models, e_align, e_ter, args.once)
        print(text + (" [truncated]" if truncated else ""))
        return EXIT_OK

    interactive = sys.stdin.isatty()

    def prompt(label):
        if interactive:
            print(label, end="", flush=True)
        line = sys.stdin.readline()
        return None if line == "" else line.strip()

    inputs = None
    if args.protein is not None:
        try:
            pid, inputs = load(args.protein)
        except ProtChatError as exc:
            print(f"error: {exc}", file=sys.stderr)
    while inputs is None:
        line = prompt("protein file> ")
        if line is None:
            return EXIT_OK
        if not line:
            continue
        try:
            pid, inputs = load(Path(line))
        except (ProtChatError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
    print(f"loaded {pid}", file=sys.stderr)
    while True:
        q = prompt("> ")
        if q is None:
            return EXIT_OK
        if not q:
            continue
        try:
            _, text, truncated = answer_question(cfg, models, *inputs, q)
        except ProtChatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            continue
        print(text + (" [truncated]" if truncated else ""), flush=True)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from . import pipeline
    from .config import load_config

    try:
        need_data = args.command not in ("chat",) and not (args.command == "precompute" and (args.fasta or args.pdb))
        cfg = load_config(args.config, args.overrides, need_data=need_data)
        if args.command == "precompute":
            return cmd_precompute(args, cfg)
        if args.command == "chat":
            return cmd_chat(args, cfg)
        if args.command == "pretrain":
            _print_summary(pipeline.cmd_pretrain(cfg, args.resume))
        elif args.command == "align":
            _print_summary(pipeline.cmd_align(cfg, args.resume))
        elif args.command == "tune":
            _print_summary(pipeline.cmd_tune(cfg, args.resume))
        elif args.command == "eval":
            pipeline.cmd_eval(cfg, args.split)
            print((cfg.out / "eval" / "metrics.tsv").read_text(), end="")
        return EXIT_OK
    except ProtChatError as exc:
        print(f"protchat {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"protchat {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
