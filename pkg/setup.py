
import setuptools

_version_ns = {}
with open("nfnplop/__version__.py") as fh:
    exec(fh.read(), _version_ns)
pkgVersion = _version_ns['__version__']

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="nfnplop",
    version=pkgVersion,
    description="nfnplop scores transformer modules by normalized feature norm and places LoRA adapters where they help most",
    license='MIT',
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=['tests']),
    include_package_data=True,
    package_data={'nfnplop': ['module-types.yaml']},
    entry_points={
        'console_scripts': ['nfnplop=nfnplop.cli:main'],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Development Status :: 4 - Beta",
    ],
    install_requires=['numpy', 'PyYAML', 'tabulate'],
    extras_require={
        'pandas': ['pandas'],
        'tests': ['pytest', 'hypothesis'],
    },
    python_requires='>=3.8',
)
