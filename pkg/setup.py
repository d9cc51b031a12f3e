from setuptools import setup

try:
    from Cython.Build import cythonize
    import numpy
except ImportError:
    ext_modules = []
else:
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("ctxst._ctc_ext", ["src/ctxst/_ctc_ext.pyx"],
                   include_dirs=[numpy.get_include()],
                   define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
        language_level=3,
    )

setup(ext_modules=ext_modules)
