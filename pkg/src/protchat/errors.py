"""Exception hierarchy shared by every subpackage.

The CLI maps these onto exit codes, so each class carries the code it should
produce when it escapes a command.
"""


class ProtChatError(Exception):
    exit_code = 1


class ContractError(ProtChatError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class DimensionError(ContractError):
    pass


class NumericError(ProtChatError, ArithmeticError):
    """NaN or Inf appeared in a tensor."""

    exit_code = 3


class TokenIndexError(ProtChatError, IndexError):
    exit_code = 2


class ParseError(ProtChatError, ValueError):
    """Malformed input text. ``location`` is a line number or character index."""

    exit_code = 2

    def __init__(self, message, *, line=None, index=None, source=None):
        self.line = line
        self.index = index
        self.source = source
        where = []
        if source is not None:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if index is not None:
            where.append(f"index {index}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class AlphabetError(ParseError):
    pass


class FormatError(ProtChatError, ValueError):
    """Binary container could not be decoded. ``field`` names the failing part."""

    exit_code = 2

    def __init__(self, message, *, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NotFoundError(ProtChatError, LookupError):
    exit_code = 2


class TokenizerError(ProtChatError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""
