import sys
from pathlib import Path

# Make shared oracle helpers importable regardless of invocation directory.
sys.path.insert(0, str(Path(__file__).parent))
