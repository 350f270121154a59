from setuptools import Extension, setup

from Cython.Build import cythonize
import numpy as np

# Build with: pip install -e . --no-build-isolation
# If the extension fails to build on an exotic platform, the package still
# works: evomoe.backend falls back to the numpy implementation at import.
extensions = [
    Extension(
        "evomoe._fastpath",
        ["src/evomoe/_fastpath.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
