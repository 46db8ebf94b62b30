"""Exception hierarchy.  The CLI maps ``ConfigError`` to exit code 2 and any
other ``NodalabError`` to exit code 1."""


class NodalabError(Exception):
    pass


class ConfigError(NodalabError, ValueError):
    pass


class GeometryError(NodalabError):
    pass


class EigensolverError(NodalabError):
    pass


class NodalError(NodalabError):
    pass


class ProjectionError(NodalabError):
    pass
