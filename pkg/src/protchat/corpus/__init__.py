from .parsers import format_fasta, parse_fasta, parse_pdb_chain, parse_ss8
from .records import (
    DatasetSplit,
    ProteinRecord,
    dump_instructions,
    load_instruction_file,
    parse_instructions,
    split_dataset,
)
from .tokenizer import Tokenizer, build_tokenizer, normalize

__all__ = [
    "DatasetSplit",
    "ProteinRecord",
    "Tokenizer",
    "build_tokenizer",
    "dump_instructions",
    "format_fasta",
    "load_instruction_file",
    "normalize",
    "parse_fasta",
    "parse_instructions",
    "parse_pdb_chain",
    "parse_ss8",
    "split_dataset",
]
