#! /usr/bin/python3

import re

from setuptools import find_packages, setup

with open('debian/changelog') as changelog:
    name, version = (
        re.compile(r'(\S+) \(([^\)~\s]+)[\)~]').match(changelog.readline()).group(1, 2)
    )

setup(
    name=name,
    version=version,
    packages=find_packages(include=('sqftforge', 'sqftforge.*')),
    scripts=['bin/forge.py'],
    install_requires=['numpy>=1.22', 'psutil'],
    python_requires='>=3.9',
    test_suite='tests',
)
