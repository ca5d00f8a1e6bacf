import configparser
import os
import sys

sys.path.insert(0, os.path.abspath('../src'))

# read metainfo from common file with setup.py
config = configparser.ConfigParser()
config.read('../metainfo.ini', encoding='utf-8')
metadata = dict(config['metainfo'])

project = metadata['name']
version = metadata['version']
release = metadata['release']
authors = metadata['authors']

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.napoleon']
master_doc = 'contents'
exclude_patterns = ['_build']

# by product that need to be updated:
latex_documents = [('contents', 'main.tex', project + ' documentation', authors, 'manual')]
