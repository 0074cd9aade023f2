#!/usr/bin/env python3
"""
Config validator for ccl_rec.

Checks the run configuration, data files and dependencies before training.
"""

import sys
from pathlib import Path


def validate(config_path: str = "config.yaml"):
    """Validate configuration and dependencies."""
    print("🔍 ccl_rec Configuration Validator\n")

    errors = []
    warnings = []

    # Check dependencies first; the config layer needs pydantic and yaml
    print("📦 Checking dependencies...")
    deps = ["numpy", "scipy", "tqdm", "pydantic", "yaml", "dotenv"]

    for dep in deps:
        try:
            __import__(dep)
            print(f"✓ {dep}")
        except ImportError:
            errors.append(f"❌ Missing dependency: {dep}")

    # Check .env
    env_file = Path(".env")
    if env_file.exists():
        print(f"\n✓ .env exists")
        try:
            from dotenv import dotenv_values

            values = dotenv_values(env_file)
            for key in ("CCL_REC_LOG_LEVEL", "CCL_REC_OUTPUT_DIR"):
                if values.get(key):
                    print(f"  - {key}: {values[key]}")
        except Exception as e:
            warnings.append(f"⚠️  Error loading .env: {e}")
    else:
        print(f"\nℹ️  No .env (output settings come from the config file)")

    # Check the run configuration
    sys.path.insert(0, str(Path(__file__).parent))
    config_file = Path(config_path)
    config = None
    if not config_file.exists():
        errors.append(f"❌ {config_file} not found")
    else:
        print(f"✓ {config_file} exists")
        try:
            from src.ccl_rec.config import load_config

            config = load_config(config_file)
            print(f"✓ {config_file} is a valid run configuration")
            print(f"  - strategy: {config.train.strategy.value}")
            print(f"  - objectives: {', '.join(o.value for o in config.train.objectives)}")
            print(f"  - output: {config.output.dir}")
        except Exception as e:
            errors.append(f"❌ Invalid configuration: {e}")

    # Check data sources
    if config is not None:
        if config.synthetic is not None:
            spec = config.synthetic
            print(f"✓ Synthetic corpus: {spec.n_users} users, {spec.n_items} items, dim {spec.dim}")
            if config.train.n_z > spec.n_items:
                errors.append(f"❌ train.n_z ({config.train.n_z}) exceeds the gallery ({spec.n_items} items)")
        else:
            for path in (config.data.interactions, config.data.features):
                if Path(path).exists():
                    print(f"✓ {path}")
                else:
                    errors.append(f"❌ Data file not found: {path}")

    # Try to import the package
    print("\n🔧 Checking package modules...")
    for module in ("diffmath", "data", "model", "augment", "objectives", "train", "evaluation", "cli"):
        try:
            __import__(f"src.ccl_rec.{module}")
            print(f"✓ {module} module")
        except Exception as e:
            errors.append(f"❌ Failed to import {module}: {e}")

    # Summary
    print("\n" + "=" * 60)
    if errors:
        print(f"❌ VALIDATION FAILED - {len(errors)} error(s)")
        for err in errors:
            print(f"  {err}")
    else:
        print("✅ VALIDATION PASSED - Ready to run!")

    if warnings:
        print(f"\n⚠️  {len(warnings)} warning(s):")
        for warn in warnings:
            print(f"  {warn}")

    print("=" * 60)

    return len(errors) == 0


if __name__ == "__main__":
    success = validate(*sys.argv[1:2])
    sys.exit(0 if success else 1)
