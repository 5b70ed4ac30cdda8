from .version import __version__


class FlowAlignError(Exception):
    pass


class ConfigurationError(FlowAlignError, ValueError):
    pass


class ShapeError(FlowAlignError, ValueError):
    pass


class NumericError(FlowAlignError, ArithmeticError):
    pass


class DomainError(FlowAlignError, ValueError):
    pass


class InputError(FlowAlignError, ValueError):
    pass


class VersionError(FlowAlignError):
    pass


def expectversion(version, have=__version__, what="flowalign"):
    """Raise VersionError unless `have` is at least `version`"""
    import packaging.version

    currentversion = packaging.version.parse(str(have))
    expectedversion = packaging.version.parse(str(version))

    if currentversion < expectedversion:
        raise VersionError(f"Please upgrade {what} to at least version "
                           f"{version} - you have {have}.")
