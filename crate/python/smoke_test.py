"""Smoke test for the ehvirt extension module.

Build it first, e.g.:
    cargo build --release -p ehvirt-python --features extension-module
    cp target/release/libehvirt.so python/ehvirt.so
"""
import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import ehvirt  # noqa: E402


def main():
    prog = ehvirt.gen_program(1, 0)
    assert prog.protect == ["compute"], prog.protect

    plain = ehvirt.run(prog)
    module = ehvirt.obfuscate(prog, seed=7)
    module.validate()
    prot = ehvirt.run(prog, module)
    assert plain.kind == prot.kind == "return"
    assert plain.checksum == prot.checksum and plain.gpr == prot.gpr
    assert prot.dispatches > 0 and plain.dispatches == 0

    again = ehvirt.Module.from_bytes(module.to_bytes())
    assert again.to_bytes() == module.to_bytes()

    name, manifest = ehvirt.scenarios()[0]
    again = ehvirt.Manifest.from_json(manifest.to_json())
    assert again.entry == manifest.entry
    eh = ehvirt.obfuscate(manifest, seed=3)
    base = ehvirt.obfuscate(manifest, seed=3, eh_protect=False)
    assert all(handler == 0x0F000040 for _, handler, _ in eh.shadow)
    leaked, scanned, bad = ehvirt.leak_scan(manifest, eh)
    assert leaked == [] and bad == [] and scanned > 0
    leaked, scanned, _ = ehvirt.leak_scan(manifest, base)
    assert len(leaked) == scanned
    r = ehvirt.run(manifest, eh)
    assert r.kind == "return" and r.interceptor_calls > 0

    assert ehvirt.diversity(1, 1000, 0)[1] == 12
    report = json.loads(ehvirt.verify("eh", 1, 0))
    assert report["failed"] == 0, report["failures"]

    print(f"ok: {name}, checksum {plain.checksum:#x}, {prot.dispatches} dispatches")


if __name__ == "__main__":
    main()
