"""Run the acceptance suite (including the timing study) and print the criterion lines."""

import subprocess
import sys

if __name__ == "__main__":
    args = [sys.executable, "-m", "pytest", "tests/test_acceptance.py", "-q", *sys.argv[1:]]
    sys.exit(subprocess.call(args))
