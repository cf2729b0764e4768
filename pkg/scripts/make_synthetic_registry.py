"""Write synthetic OpenAPI documents (and optionally a compiled registry).

    python scripts/make_synthetic_registry.py --tools 18000 --out-dir synthetic/
    toolgate compile synthetic/*.json --service azure --service gitlab --service rocketchat \
        --base-url http://localhost:9000 --out tools.jsonl
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from toolgate.registry import save
from toolgate.synthetic import synthetic_openapi, synthetic_registry


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tools", type=int, default=18_000)
    ap.add_argument("--services", nargs="+", default=["azure", "gitlab", "rocketchat"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", type=Path, required=True)
    ap.add_argument("--registry", type=Path, help="also write the compiled registry here")
    args = ap.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    share, rest = divmod(args.tools, len(args.services))
    for k, service in enumerate(args.services):
        n = share + (1 if k < rest else 0)
        path = args.out_dir / f"{service}.json"
        path.write_text(json.dumps(synthetic_openapi(n, args.seed * 1000 + k, service), indent=1))
        print(f"{path}: {n} operations")
    if args.registry:
        save(synthetic_registry(args.tools, args.seed, tuple(args.services)), args.registry)
        print(f"{args.registry}: {args.tools} tools")


if __name__ == "__main__":
    main()
