from setuptools import setup, find_packages

setup(
    name='ZFusion',
    version='0.1',
    packages=find_packages(exclude=['tests', 'examples*']),  # every folder with __init__.py
    install_requires=[
        'numpy',
        'scipy',
        'pandas',
        'matplotlib',
        'PyYAML',
        'shapely>=2.0',
    ],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['zfuse=experiments.cli:main']},
)
