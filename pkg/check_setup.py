import sys
import importlib
import subprocess
import os

REQUIRED_PACKAGES = [
    ("numpy", "numpy"),
    ("scipy", "scipy"),
    ("skimage", "scikit-image"),
    ("pandas", "pandas"),
    ("PIL", "Pillow"),
    ("pydantic", "pydantic"),
    ("dotenv", "python-dotenv"),
    ("tqdm", "tqdm"),
    ("pytest", "pytest"),
    ("hypothesis", "hypothesis"),
]

# optional: only needed for the KITTI smoke test and real-data runs
KITTI_ROOT = os.environ.get("KITTI_ROOT")
KITTI_FILES = [
    ("sequences/04/velodyne/", "Sequence 04 Velodyne scans"),
    ("poses/04.txt", "Sequence 04 ground truth"),
]

print(f"\n{'='*55}")
print("  LIDAR SLAM - SETUP VERIFICATION")
print(f"{'='*55}")

pv = sys.version_info
status = "OK" if pv >= (3, 10) else "FAIL - need 3.10+"
print(f"\n[Python]  {pv.major}.{pv.minor}.{pv.micro}  ->  {status}")

try:
    r = subprocess.run(["git", "--version"], capture_output=True, text=True)
    print(f"[Git]     {r.stdout.strip()}  ->  OK")
except FileNotFoundError:
    print("[Git]     NOT FOUND  ->  WARN")

print(f"\n{'-'*55}")
print("  PYTHON PACKAGES")
print(f"{'-'*55}")
missing = []
for import_name, pkg_name in REQUIRED_PACKAGES:
    try:
        mod = importlib.import_module(import_name)
        ver = getattr(mod, "__version__", "installed")
        print(f"  OK   {pkg_name:<30} {ver}")
    except ImportError:
        print(f"  FAIL {pkg_name:<30} NOT INSTALLED")
        missing.append(pkg_name)

if "scikit-image" not in missing:
    try:
        from src.slam.brief_pattern import STEERED
        print(f"  OK   {'ORB sampling pattern':<30} {STEERED.shape[0]} bins")
    except Exception as exc:
        print(f"  FAIL {'ORB sampling pattern':<30} {exc}")
        missing.append("scikit-image")

print(f"\n{'-'*55}")
print("  KITTI DATASET (optional)")
print(f"{'-'*55}")
data_missing = []
if not KITTI_ROOT:
    print("  SKIP   KITTI_ROOT not set - synthetic sequences only")
else:
    for rel, label in KITTI_FILES:
        path = os.path.join(KITTI_ROOT, rel)
        exists = os.path.exists(path)
        status = "OK" if exists else "MISSING"
        size = ""
        if exists and os.path.isfile(path):
            with open(path) as fh:
                size = f"({sum(1 for _ in fh)} poses)"
        elif exists and os.path.isdir(path):
            count = len([f for f in os.listdir(path) if f.endswith(".bin")])
            size = f"({count} scans)"
        print(f"  {status:<6} {label:<35} {size}")
        if not exists:
            data_missing.append(path)

print(f"\n{'='*55}")
if missing:
    print(f"  MISSING PACKAGES: pip install {' '.join(sorted(set(missing)))}")
if data_missing:
    print("  KITTI FILES MISSING - check KITTI_ROOT layout in README")
if not missing and not data_missing:
    print("  ALL CHECKS PASSED - ready to run")
elif not missing:
    print("  PACKAGES OK - synthetic runs will work")
print(f"{'='*55}\n")
