import os
import sys

# Make `utilities` importable when pytest is launched from any directory
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
