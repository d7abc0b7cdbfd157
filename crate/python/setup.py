"""Build the tsfactor_py extension module by delegating to cargo.

The compiled cdylib (crates/tsfactor-py) already exports the CPython module
init symbol, so "building" the extension is just a cargo invocation plus a
copy of the resulting shared library to the filename Python expects.
"""

import shutil
import subprocess
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

REPO_ROOT = Path(__file__).resolve().parent.parent


class CargoBuildExt(build_ext):
    def build_extension(self, ext):
        subprocess.run(
            ["cargo", "build", "--release", "-p", "tsfactor-py"],
            cwd=REPO_ROOT,
            check=True,
        )
        release_dir = REPO_ROOT / "target" / "release"
        candidates = [
            release_dir / "libtsfactor_py.so",
            release_dir / "libtsfactor_py.dylib",
            release_dir / "tsfactor_py.dll",
        ]
        built = next((p for p in candidates if p.exists()), None)
        if built is None:
            raise FileNotFoundError(f"no built cdylib under {release_dir}")
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built, dest)


setup(
    ext_modules=[Extension("tsfactor_py", sources=[])],
    cmdclass={"build_ext": CargoBuildExt},
)
