import sys

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    # the compiled core is an accelerator only; a failed build leaves the
    # numpy fallback in place
    def run(self):
        try:
            super().run()
        except Exception as exc:
            print(f"warning: compiled core not built ({exc})", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: {ext.name} not built ({exc})", file=sys.stderr)


try:
    from Cython.Build import cythonize
    ext_modules = cythonize(
        [Extension("dyadic_t1._core", ["src/dyadic_t1/_core.pyx"],
                   include_dirs=[np.get_include()],
                   extra_compile_args=["-O3"])],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})
