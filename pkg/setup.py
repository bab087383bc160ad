"""Build script for the compiled correlation kernels.

The extension is optional at runtime: if it fails to build or import, the
package falls back to a pure-numpy backend (see fluctoscope._kernels).
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - build-time only
    cythonize = None

extensions = []
if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "fluctoscope._kernels._corr_ext",
                ["src/fluctoscope/_kernels/_corr_ext.pyx"],
                extra_compile_args=["-O3", "-march=native", "-ffast-math",
                                    "-funroll-loops", "-fopenmp"],
                extra_link_args=["-fopenmp"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
