import os
from setuptools import setup


requirements = [
    'sqlalchemy >= 1.4',
    'coloredlogs',
    'numpy >= 1.17',
    'scipy >= 1.4',
    'PyYAML >= 5.1',
]
setup(
    name='gpuclustersim',
    version='1.0',
    description='Trace-driven discrete-event simulator of a multi-tenant GPU cluster for DNN training.',
    license='GNU',
    packages=["src", "src.lib", "src.handlers", "src.scripts"],
    package_data={"src": ["data/*.yaml", "data/*.jsonl"]},
    zip_safe=False,
    install_requires=requirements,
    extras_require={'tests': ['pytest']},
    python_requires='>=3.7',
    entry_points=dict(console_scripts=[
        'sim = src.app:main',
        'init_db = src.scripts.init_db:main',
    ]),
    )


if not os.path.exists('logs'):
    os.mkdir('logs')
