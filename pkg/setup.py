from setuptools import find_packages, setup

setup(name = "WeakMeasPy",
    version = "0.2.0",
    description = "Weak-measurement decompositions of quantum measurements: chains, simplex diffusions and state diffusion",
    long_description = open("README.md").read(),
    long_description_content_type = "text/markdown",
    packages = find_packages(include=["weakmeaspy", "weakmeaspy.*"]),
    package_data = {"weakmeaspy": ["examples/configs/*.yaml", "examples/configs/*.json"]},
    python_requires = ">=3.10",
    install_requires = ["numpy>=1.24", "scipy>=1.10", "PyYAML>=6.0"],
    extras_require = {"test": ["pytest>=7"]},
    entry_points = {"console_scripts": ["weakmeaspy = weakmeaspy.cli:main"]},
   )
