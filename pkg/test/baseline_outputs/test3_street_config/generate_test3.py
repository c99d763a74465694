#!/usr/bin/env python3
"""
Test 3: Street - Configuration File and Command Line
Runs the whole pipeline through the command line front end with a configuration file
"""
import sys
import os

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', '..', 'src'))

from surfelmap.cli import run

# Change to test directory
test_dir = os.path.dirname(os.path.abspath(__file__))
os.chdir(test_dir)

print("=" * 70)
print("Test 3: Street - Configuration File and Command Line")
print("=" * 70)

print("\nStep 1: Misspelled key is rejected")
print("-" * 70)
status = run(['pipeline', '-w', 'street', '-c', 'street.cfg', '--set', 'lamda_GMM=1.0'])
if status != 2:
    print(f"[ERROR] expected exit status 2, got {status}")
    sys.exit(1)
print("[OK] exit status 2")

print("\nStep 2: Full pipeline")
print("-" * 70)
status = run(['pipeline', '-w', 'street', '-c', 'street.cfg', '--seed', '3'])
if status != 0:
    print(f"[ERROR] pipeline failed with exit status {status}")
    sys.exit(1)
print("[OK] pipeline finished")

for name in ('checkpoints/surfels_000100.ply', 'checkpoints/surfels_000200.ply', 'metrics.csv',
             'nvs_metrics.csv', 'run_summary.json'):
    if not os.path.exists(os.path.join('street', name)):
        print(f"[ERROR] missing street/{name}")
        sys.exit(1)
print("[OK] checkpoints and metrics written")

print("\nStep 3: Rerun a single stage")
print("-" * 70)
status = run(['eval-mesh', '-w', 'street', '-c', 'street.cfg', '--set', 'metric_threshold=0.05'])
print(f"[OK] eval-mesh exit status {status}")

print("\n" + "=" * 70)
print("Test 3 Complete!")
print("Generated files:")
print("  - street/surfels.ply, street/checkpoints/")
print("  - street/metrics.csv, street/nvs_metrics.csv")
print("  - street/run_summary.json")
print("=" * 70)
