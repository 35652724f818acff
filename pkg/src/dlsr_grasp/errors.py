"""Exception hierarchy.

Everything raised deliberately by the package derives from ``DLSRError`` so
the CLI can map it to the data-error exit status in one place.
"""


class DLSRError(Exception):
    pass


class NotARectangle(DLSRError, ValueError):
    pass


class EmptyGroundTruth(DLSRError, ValueError):
    pass


class ParseError(DLSRError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class DimensionMismatch(DLSRError, ValueError):
    pass


class TooFewObjects(DLSRError, ValueError):
    pass


class DegenerateRect(DLSRError, ValueError):
    pass


class NoForeground(DLSRError):
    pass


class NoCandidates(DLSRError):
    pass


class TooFewPatches(DLSRError, ValueError):
    pass


class InsufficientPatches(DLSRError, ValueError):
    pass


class SingularSupport(DLSRError, ArithmeticError):
    pass


class SingleClass(DLSRError, ValueError):
    pass


class BundleError(DLSRError):
    pass


class BadMagic(BundleError):
    pass


class VersionMismatch(BundleError):
    pass


class TruncatedSection(BundleError):
    pass
