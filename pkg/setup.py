"""Build hook: compiles the convolution kernels when Cython + a C compiler
are available.  The package works without the extension (a numpy fallback is
selected at import), so any build failure here is non-fatal."""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from setuptools import Extension
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "flowscale._kernels._convext",
                ["src/flowscale/_kernels/_convext.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - depends on build host
    print(f"flowscale: building without compiled kernels ({exc})")

setup(ext_modules=ext_modules)
