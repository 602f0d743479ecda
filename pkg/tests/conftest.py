import os
import sys

# make the independent oracle module (reference.py) importable from any cwd
sys.path.insert(0, os.path.dirname(__file__))
