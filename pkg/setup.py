"""Build script for the compiled kernel core.

The extension is optional: if Cython or a C compiler is unavailable the
install still succeeds and the package falls back to the NumPy kernels at
import time. Build in place for development with:

    python setup.py build_ext --inplace
"""

import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

# No -ffast-math and contraction off: the kernels promise IEEE-754 results
# that match the pure-Python backend bit for bit.
if sys.platform == "win32":
    COMPILE_ARGS = ["/O2", "/fp:strict"]
else:
    COMPILE_ARGS = ["-O3", "-ffp-contract=off"]


class OptionalBuildExt(build_ext):
    """Treat extension build failures as a warning, not an install failure."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - toolchain dependent
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - toolchain dependent
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        sys.stderr.write(
            f"warning: building the compiled kernels failed ({exc}); "
            "pairzsl will use the pure-Python backend\n"
        )


def _extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        sys.stderr.write(
            "warning: Cython not available; skipping the compiled kernels\n"
        )
        return []
    return cythonize(
        [
            Extension(
                "pairzsl._kernels",
                ["src/pairzsl/_kernels.pyx"],
                extra_compile_args=COMPILE_ARGS,
            )
        ],
        compiler_directives={"language_level": 3},
    )


setup(ext_modules=_extensions(), cmdclass={"build_ext": OptionalBuildExt})
