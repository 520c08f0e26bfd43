import os
from dotenv import load_dotenv

load_dotenv()

# === Scale presets ===
# Each preset can be overridden from the environment (or a .env file).
SCALE_PRESETS = {
    'desk': {
        'nx': int(os.getenv('SAR_DESK_NX', '25')),
        'ny': int(os.getenv('SAR_DESK_NY', '17')),
        'plans': int(os.getenv('SAR_DESK_PLANS', '20000')),
        'eb_every': int(os.getenv('SAR_EB_EVERY', '5')),
    },
    'full': {
        'nx': int(os.getenv('SAR_FULL_NX', '50')),
        'ny': int(os.getenv('SAR_FULL_NY', '33')),
        'plans': int(os.getenv('SAR_FULL_PLANS', '100000')),
        'eb_every': int(os.getenv('SAR_FULL_EB_EVERY', '5')),
    },
}

# Physical extent of the search area (meters)
EXTENT_X_M = float(os.getenv('SAR_EXTENT_X_M', '4000'))
EXTENT_Y_M = float(os.getenv('SAR_EXTENT_Y_M', '2700'))

OUTPUT_DIR = os.getenv('SAR_OUTPUT_DIR', './results')
LOG_LEVEL = os.getenv('SAR_LOG_LEVEL', 'INFO')


def output_root() -> str:
    """Output root, re-read so tests and the CLI can override it late."""
    return os.getenv('SAR_OUTPUT_DIR', OUTPUT_DIR)


def scale_preset(scale: str) -> dict:
    """Resolve 'desk', 'full' or an explicit 'NXxNY' string into a preset dict."""
    if scale in SCALE_PRESETS:
        return dict(SCALE_PRESETS[scale])
    parts = scale.lower().split('x')
    if len(parts) == 2 and all(p.isdigit() for p in parts):
        if int(parts[0]) < 1 or int(parts[1]) < 1:
            raise ValueError(f"Grid dimensions must be positive: {scale}")
        preset = dict(SCALE_PRESETS['desk'])
        preset['nx'], preset['ny'] = int(parts[0]), int(parts[1])
        return preset
    raise ValueError(f"Unknown scale: {scale}")
