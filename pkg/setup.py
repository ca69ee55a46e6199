#!/usr/bin/env python3
"""
FlowAug - Setup and Smoke Script
Installs dependencies and runs a desk-scale pass through every CLI command
"""

import os
import subprocess
import sys
import tempfile


def install_dependencies():
    """Install required Python packages"""
    print("Installing dependencies...")
    try:
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
        print("✅ Dependencies installed successfully!")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Error installing dependencies: {e}")
        return False


def run_command(*args):
    """Run one CLI command under the testing preset; returns True on exit code 0"""
    env = dict(os.environ, FLOWAUG_ENV="testing")
    result = subprocess.run([sys.executable, "app.py", *args], env=env, capture_output=True, text=True)
    status = "✅" if result.returncode == 0 else f"❌ (exit {result.returncode})"
    print(f"{status} {' '.join(args[:1])}")
    if result.returncode != 0:
        print(f"   {result.stderr.strip()}")
    return result.returncode == 0


def smoke_test():
    """gen-data, train-flow, sample, augment, crossval, sweep and verify on tiny settings"""
    print("\nRunning smoke pipeline...")
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        flow = os.path.join(tmp, "flow")
        checkpoint = os.path.join(flow, "flow.ckpt")
        steps = [
            ("gen-data", "--out", data, "--seed", "1"),
            ("train-flow", "--data", data, "--out", flow, "--seed", "2"),
            ("sample", "--checkpoint", checkpoint, "--out", os.path.join(tmp, "samples"), "--seed", "3", "--n", "4"),
            ("augment", "--checkpoint", checkpoint, "--data", data, "--out", os.path.join(tmp, "aug"), "--seed", "4"),
            ("crossval", "--data", data, "--out", os.path.join(tmp, "cv"), "--seed", "5"),
            ("sweep", "--data", data, "--out", os.path.join(tmp, "sweep"), "--seed", "6"),
            ("verify", "--trials", "5"),
        ]
        return all(run_command(*step) for step in steps)


def main():
    """Main setup function"""
    print("FlowAug - Setup and Smoke Script")
    print("=" * 40)

    if "--skip-install" not in sys.argv and not install_dependencies():
        sys.exit(1)

    if smoke_test():
        print("\n✅ All commands completed")
    else:
        print("\n❌ Some commands failed")
        sys.exit(1)


if __name__ == "__main__":
    if len(sys.argv) > 1 and not sys.argv[1].startswith("-"):
        # Invoked by a build frontend (egg_info, bdist_wheel, ...): package metadata lives in pyproject.toml
        from setuptools import setup

        setup()
    else:
        main()
