import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

# See https://packaging.python.org/guides/single-sourcing-package-version/
exec(open("flowalign/version.py").read())

setuptools.setup(
    name="flowalign",
    version=__version__,
    description="Reward modelling and alignment of rectified flow models on a toy trajectory world",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests"]),
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
        "Intended Audience :: Science/Research",
    ],
    python_requires=">=3.9",
    install_requires=["numpy", "scipy", "tqdm", "packaging", "matplotlib", "pandas>=1.5", "sympy"],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["flowalign=flowalign.cli:main"]},
)
