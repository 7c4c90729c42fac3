"""
knitply: procedural knitted fabric modeling and ply-level rendering.

Pattern cells are tiled and stitched into yarns, the yarns grow twisted plies, the plies are
mapped onto a UV-mapped mesh and the result is path traced and fitted to references.
"""
__version__ = '0.1.0'
