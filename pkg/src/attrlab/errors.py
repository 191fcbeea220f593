"""Exception hierarchy. Every class maps to a distinct CLI exit code."""


class AttrlabError(Exception):
    exit_code = 1


class MalformedFile(AttrlabError):
    exit_code = 3


class PatternViolation(AttrlabError):
    exit_code = 4


class InconsistentIndicator(AttrlabError):
    exit_code = 5


class NotIdentified(AttrlabError):
    exit_code = 6

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class IncompleteLatent(AttrlabError):
    exit_code = 7


class ZeroMass(AttrlabError):
    exit_code = 8


class NonFinitePosterior(AttrlabError):
    exit_code = 9


class InsufficientDraws(AttrlabError):
    exit_code = 10


class AutocorrelationTooHigh(AttrlabError):
    exit_code = 11


class Separation(AttrlabError):
    exit_code = 12


class RankDeficient(AttrlabError):
    exit_code = 13


class TooFewDraws(AttrlabError):
    exit_code = 14
