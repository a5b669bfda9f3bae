"""Build script: compiles the hot simulation kernels as a C extension.

The package works without the extension (a pure-Python mirror of the
kernels is selected at import time), so a failed compile degrades to a
slow but correct install instead of aborting.
"""

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class BuildFailed(Exception):
    pass


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            raise BuildFailed(str(exc))

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            raise BuildFailed(str(exc))


def extensions():
    import os

    import numpy.random
    from Cython.Build import cythonize

    # the C distribution functions (ziggurat normal/exponential, ...) live
    # in numpy's static helper library
    npyrandom_dir = os.path.join(os.path.dirname(numpy.random.__file__), "lib")
    ext = Extension(
        "backbonesim.kernels._core",
        ["src/backbonesim/kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        library_dirs=[npyrandom_dir],
        libraries=["npyrandom"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


try:
    setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
except (BuildFailed, ImportError) as exc:
    print(f"*** extension build failed ({exc}); installing pure-Python kernels only")
    setup()
