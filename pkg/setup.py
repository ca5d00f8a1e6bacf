# -*- coding: utf-8 -*-
import configparser

from setuptools import setup, find_packages

# Reads the metainfo file
config = configparser.ConfigParser()
config.read('metainfo.ini', encoding='utf-8')
metadata = dict(config['metainfo'])

#The metainfo file must contain
# version, release, project, name, namespace, package,
# description, long_description,
# authors, authors_email, url and license
# * name is the full name (e.g., Aerolink.BeamVLM) whereas package is only 'BeamVLM'

namespace = metadata['namespace']

# Packages list, namespace and root directory of packages
pkg_root_dir = 'src'
packages = find_packages(pkg_root_dir)
package_dir = {'': pkg_root_dir}

install_requires = [
    'numpy>=1.22',
    'scipy>=1.8',
    'pandas>=1.4',
    'matplotlib>=3.5',
    'Pillow>=9.1',
    'torch>=2.4',
    'tqdm>=4.60',
]
extras_require = {
    'test': ['pytest>=7', 'hypothesis>=6'],
}

setup(
    name=metadata['name'],
    version=metadata['version'],
    description=metadata['description'],
    long_description=metadata['long_description'],
    author=metadata['authors'],
    author_email=metadata['authors_email'],
    url=metadata['url'],
    license=metadata['license'],
    keywords='mmwave, beam prediction, UAV, vision-language model, LoRA',
    python_requires='>=3.10',

    # package installation
    packages=packages,
    package_dir=package_dir,
    zip_safe=False,

    # Dependencies
    install_requires=install_requires,
    extras_require=extras_require,

    # scenario presets and prompt templates
    include_package_data=True,
    package_data={'aerolink.beamvlm': ['data/scenarios/*.json', 'data/prompts/*.txt']},

    # Declare scripts and predictors as entry_points (extensions) of the package
    entry_points={
        'console_scripts': ['beamvlm = aerolink.beamvlm.cli:main'],
        'beamvlm.predictor': ['vlm = aerolink.beamvlm.evaluation:make_vlm_predictor',
                              'rnn = aerolink.beamvlm.evaluation:make_rnn_predictor',
                              'lstm = aerolink.beamvlm.evaluation:make_lstm_predictor',
                              'oracle = aerolink.beamvlm.evaluation:make_oracle_predictor'],
        },
    )
