""" Generative vision-language beam prediction for ground-to-UAV mmWave links.

Desk-scale toolkit: a synthetic camera/channel scene generator, a small
patch-embedding decoder trained to write future beam indices as text, and the
harness that scores it against recurrent baselines.
"""
__version__ = '1.0.0'
