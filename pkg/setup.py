import sys

from setuptools import setup, Extension
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the fast kernels if we can; fall back to pure numpy if not."""

    def run(self):
        try:
            build_ext.run(self)
        except Exception as exc:
            print(f"warning: compiled kernels skipped ({exc}); "
                  "numpy backend will be used", file=sys.stderr)

    def build_extension(self, ext):
        try:
            build_ext.build_extension(self, ext)
        except Exception as exc:
            print(f"warning: building {ext.name} failed ({exc}); "
                  "numpy backend will be used", file=sys.stderr)


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "shiftscan.backends._ckernels",
        sources=["src/shiftscan/backends/_ckernels.pyx",
                 "src/shiftscan/backends/convkernels.c"],
        include_dirs=[numpy.get_include(), "src/shiftscan/backends"],
        extra_compile_args=["-O3", "-march=native"],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
