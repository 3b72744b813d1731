"""Dispatch to the compiled shading kernels when built, numpy otherwise."""

from . import _shade_py

try:
    from . import _shade as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _shade_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_active = "cython" if _compiled is not None else "python"


def available() -> list[str]:
    return list(_BACKENDS)


def backend() -> str:
    return _active


def use_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable (have {available()})")
    _active = name


def shade(*args, **kwargs):
    return _BACKENDS[_active].shade(*args, **kwargs)


def env_adjoint(*args, **kwargs):
    return _BACKENDS[_active].env_adjoint(*args, **kwargs)


def any_hit(*args, **kwargs):
    return _BACKENDS[_active].any_hit(*args, **kwargs)
